"""
Датчик глубины (воксельный DDA-рейкастинг) и накопленное облако точек P_t.
"""
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import PoseError
from geometry import N_YAWS, Pose
from worldgen import Scene

VoxelKey = Tuple[int, int, int]


@dataclass(frozen=True)
class CameraModel:
    width: int = 64
    height: int = 48
    hfov: float = 90.0  # градусы

    def __post_init__(self):
        if not 0.0 < self.hfov < 180.0:
            raise ValueError("hfov должен быть в (0, 180)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("размер изображения должен быть положительным")

    @property
    def focal(self) -> float:
        return self.width / (2.0 * math.tan(math.radians(self.hfov) / 2.0))

    @property
    def intrinsics(self) -> np.ndarray:
        """Матрица K; главная точка в центре изображения"""
        return np.array([[self.focal, 0.0, self.width / 2.0],
                         [0.0, self.focal, self.height / 2.0],
                         [0.0, 0.0, 1.0]])

    @cached_property
    def pixel_rays(self) -> np.ndarray:
        """K^-1 [u v 1]^T для центров пикселей, форма (H, W, 3), в системе камеры"""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        homo = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        return homo @ np.linalg.inv(self.intrinsics).T


def camera_rotation(yaw: float) -> np.ndarray:
    """Поворот камера -> мир: столбцы (вправо, вниз, вперед), мир Y вверх"""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, 0.0, c],
                     [0.0, -1.0, 0.0],
                     [c, 0.0, s]])


def render_depth_from(scene: Scene, origin: np.ndarray, yaw: float, cam: CameraModel,
                      noise_std: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Глубина (дальность вдоль луча) точным 3D-DDA по вокселям сцены"""
    rays = cam.pixel_rays.reshape(-1, 3)
    dirs = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = dirs @ camera_rotation(yaw).T
    n = len(dirs)

    cs = scene.cell_size
    solid = scene.solid_voxels
    origin = np.asarray(origin, dtype=np.float64)
    voxel = np.floor(origin / cs).astype(np.int64)
    voxel = np.broadcast_to(voxel, (n, 3)).copy()

    step = np.where(dirs > 0, 1, -1).astype(np.int64)
    with np.errstate(divide='ignore', invalid='ignore'):
        boundary = (voxel + (step > 0)) * cs
        t_max = np.where(dirs != 0, (boundary - origin) / dirs, np.inf)
        t_delta = np.where(dirs != 0, cs / np.abs(dirs), np.inf)

    depth = np.zeros(n)
    active = np.arange(n)
    max_steps = sum(solid.shape) + 3
    for _ in range(max_steps):
        if len(active) == 0:
            break
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        t_enter = tm[np.arange(len(active)), axis]
        voxel[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]

        v = voxel[active] + 1
        hit = solid[v[:, 0], v[:, 1], v[:, 2]]
        depth[active[hit]] = t_enter[hit]
        active = active[~hit]

    if noise_std > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        depth = np.maximum(depth + rng.normal(0.0, noise_std, size=depth.shape), 1e-6)
    return depth.reshape(cam.height, cam.width)


def render_depth(scene: Scene, pose: Pose, cam: CameraModel, noise_std: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if not scene.is_traversable(pose.cell):
        raise PoseError(f"поза {pose} вне проходимой области")
    origin = pose.position(scene.cell_size, scene.agent_height)
    return render_depth_from(scene, origin, pose.yaw, cam, noise_std, rng)


def backproject_from(depth: np.ndarray, origin: np.ndarray, yaw: float, cam: CameraModel) -> np.ndarray:
    """p = T (D_z K^-1 [u v 1]^T); D хранит дальность, D_z = D / |K^-1 [u v 1]|"""
    rays = cam.pixel_rays
    if depth.shape != rays.shape[:2]:
        raise ValueError(f"глубина {depth.shape} не соответствует камере {rays.shape[:2]}")
    valid = depth > 0
    rays = rays[valid]
    z_depth = depth[valid] / np.linalg.norm(rays, axis=1)
    cam_points = rays * z_depth[:, None]
    return cam_points @ camera_rotation(yaw).T + np.asarray(origin, dtype=np.float64)


def backproject(depth: np.ndarray, pose: Pose, cam: CameraModel,
                cell_size: float = 0.5, agent_height: float = 1.65) -> np.ndarray:
    return backproject_from(depth, pose.position(cell_size, agent_height), pose.yaw, cam)


def interpolated_views(scene: Scene, a: Pose, b: Pose, frames: int) -> List[Tuple[np.ndarray, float]]:
    """Промежуточные (положение, рыскание) между соседними позами, без концов"""
    pa = a.position(scene.cell_size, scene.agent_height)
    pb = b.position(scene.cell_size, scene.agent_height)
    turn = ((b.yaw_index - a.yaw_index + N_YAWS // 2) % N_YAWS) - N_YAWS // 2
    views = []
    for f in range(1, frames + 1):
        alpha = f / (frames + 1)
        yaw = a.yaw + alpha * turn * (2.0 * math.pi / N_YAWS)
        views.append((pa + alpha * (pb - pa), yaw))
    return views


class SurfelCloud:
    """Облако точек с воксельным хешем: одна точка-представитель на воксель"""

    def __init__(self, voxel_size: float = 0.5):
        self.voxel_size = voxel_size
        self._index: Dict[VoxelKey, int] = {}
        self._points = np.zeros((64, 3))
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def points(self) -> np.ndarray:
        return self._points[:self._count]

    def keys(self) -> List[VoxelKey]:
        return list(self._index.keys())

    def key_of(self, point: np.ndarray) -> VoxelKey:
        k = np.floor(np.asarray(point) / self.voxel_size).astype(np.int64)
        return int(k[0]), int(k[1]), int(k[2])

    def __contains__(self, key: VoxelKey) -> bool:
        return key in self._index

    def copy(self) -> "SurfelCloud":
        other = SurfelCloud(self.voxel_size)
        other._index = dict(self._index)
        other._points = self._points[:max(self._count, 1)].copy()
        other._count = self._count
        return other

    def _novel(self, points: np.ndarray) -> Tuple[List[int], List[VoxelKey]]:
        if len(points) == 0:
            return [], []
        keys = np.floor(points / self.voxel_size).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        first.sort()
        rows, novel_keys = [], []
        for idx in first:
            key = (int(keys[idx, 0]), int(keys[idx, 1]), int(keys[idx, 2]))
            if key not in self._index:
                rows.append(int(idx))
                novel_keys.append(key)
        return rows, novel_keys

    def novel(self, points: np.ndarray) -> np.ndarray:
        """Точки, которые insert добавил бы (облако не меняется)"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rows, _ = self._novel(points)
        return points[rows] if rows else np.zeros((0, 3))

    def insert(self, points: np.ndarray) -> np.ndarray:
        """Добавляет точки в незанятые воксели; возвращает реально добавленные"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rows, novel_keys = self._novel(points)
        if not rows:
            return np.zeros((0, 3))
        for offset, key in enumerate(novel_keys):
            self._index[key] = self._count + offset

        added = points[rows]
        needed = self._count + len(added)
        if needed > len(self._points):
            grown = np.zeros((max(needed, 2 * len(self._points)), 3))
            grown[:self._count] = self._points[:self._count]
            self._points = grown
        self._points[self._count:needed] = added
        self._count = needed
        return added

    def truncate(self, count: int):
        """Откат к первым count точкам (отмена последних insert)"""
        if count >= self._count:
            return
        keys = np.floor(self._points[count:self._count] / self.voxel_size).astype(np.int64)
        for k in keys:
            del self._index[(int(k[0]), int(k[1]), int(k[2]))]
        self._count = count

    def candidates(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Точки из вокселей, пересекающих куб радиуса radius вокруг point"""
        reach = int(math.ceil(radius / self.voxel_size))
        ci, ck, cj = self.key_of(point)
        rows = []
        for di in range(-reach, reach + 1):
            for dk in range(-reach, reach + 1):
                for dj in range(-reach, reach + 1):
                    idx = self._index.get((ci + di, ck + dk, cj + dj))
                    if idx is not None:
                        rows.append(idx)
        return self.points[rows] if rows else np.zeros((0, 3))

    def nearest_distance(self, point: np.ndarray, cap: float) -> float:
        """Расстояние до ближайшей точки (не больше cap), поиск расширяющимися оболочками"""
        if self._count == 0:
            return cap
        point = np.asarray(point, dtype=np.float64)
        max_reach = int(math.ceil(cap / self.voxel_size)) + 1
        ci, ck, cj = self.key_of(point)
        best = math.inf
        rows: List[int] = []
        for reach in range(0, max_reach + 1):
            # оболочка куба радиуса reach
            for di in range(-reach, reach + 1):
                for dk in range(-reach, reach + 1):
                    for dj in range(-reach, reach + 1):
                        if max(abs(di), abs(dk), abs(dj)) != reach:
                            continue
                        idx = self._index.get((ci + di, ck + dk, cj + dj))
                        if idx is not None:
                            rows.append(idx)
            if rows:
                best = float(np.min(np.linalg.norm(self.points[rows] - point, axis=1)))
            # все точки ближе reach * voxel уже просмотрены
            if best <= reach * self.voxel_size:
                break
        return min(best, cap)


def integrate(cloud: SurfelCloud, points: np.ndarray) -> SurfelCloud:
    """P_t = P_{t-1} ∪ points с дедупликацией по вокселям (облако изменяется на месте)"""
    cloud.insert(points)
    return cloud


def save_xyz(cloud: SurfelCloud, path: Path):
    """ASCII XYZ для внешних просмотрщиков"""
    np.savetxt(path, cloud.points, fmt='%.6f')
