"""
Вложение прогресса картирования E_{c_t}: K изображений плотности горизонтальных
срезов облака и гистограмма посещений, центрированные на агенте.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from geometry import Pose, WindowSpec
from sensor import SurfelCloud


@dataclass(frozen=True, eq=False)
class ExplorationEmbedding:
    slices: np.ndarray      # (K, G, G), счетчики точек
    trajectory: np.ndarray  # (G, G), счетчики посещений
    center: Pose

    def as_input(self, density_scale: float) -> np.ndarray:
        """Вход сети (K+1, G, G), нормированный одной константой"""
        stacked = np.concatenate([self.slices, self.trajectory[None]], axis=0)
        return stacked / density_scale


def _center_xz(center: Pose, spec: WindowSpec) -> np.ndarray:
    i, j = center.cell
    return np.array([(i + 0.5) * spec.cell, (j + 0.5) * spec.cell])


def crop_filter(cloud: Union[SurfelCloud, np.ndarray], center: Pose, spec: WindowSpec) -> np.ndarray:
    """Точки в замкнутом квадрате |p_x - x| <= r, |p_z - z| <= r"""
    points = cloud.points if isinstance(cloud, SurfelCloud) else np.asarray(cloud, dtype=np.float64)
    points = points.reshape(-1, 3)
    x, z = _center_xz(center, spec)
    r = spec.radius
    keep = (np.abs(points[:, 0] - x) <= r) & (np.abs(points[:, 2] - z) <= r)
    return points[keep]


def project(xz: np.ndarray, center: Pose, spec: WindowSpec) -> np.ndarray:
    """φ: горизонтальные координаты -> пиксели (u, v); граница +r прижимается к последнему пикселю"""
    x, z = _center_xz(center, spec)
    r = spec.radius
    scale = spec.grid / (2.0 * r)
    u = np.floor((xz[:, 0] - x + r) * scale).astype(np.int64)
    v = np.floor((xz[:, 1] - z + r) * scale).astype(np.int64)
    return np.clip(np.stack([u, v], axis=1), 0, spec.grid - 1)


def slice_densities(points: np.ndarray, center: Pose, spec: WindowSpec) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    images = np.zeros((spec.slices, spec.grid, spec.grid))
    if len(points) == 0:
        return images
    level = np.floor((points[:, 1] - spec.y_min) / spec.h_slice).astype(np.int64)
    # пол и потолок лежат ровно на границах y_min / y_max
    level = np.clip(level, 0, spec.slices - 1)
    uv = project(points[:, [0, 2]], center, spec)
    np.add.at(images, (level, uv[:, 0], uv[:, 1]), 1.0)
    return images


def trajectory_histogram(history: Sequence[Pose], center: Pose, spec: WindowSpec) -> np.ndarray:
    """Счетчики посещений прошлых позиций в окне (текущая поза учитывается, если есть в history)"""
    image = np.zeros((spec.grid, spec.grid))
    if not history:
        return image
    cells = np.array([pose.cell for pose in history], dtype=np.float64)
    xz = (cells + 0.5) * spec.cell
    x, z = _center_xz(center, spec)
    inside = (np.abs(xz[:, 0] - x) <= spec.radius) & (np.abs(xz[:, 1] - z) <= spec.radius)
    uv = project(xz[inside], center, spec)
    np.add.at(image, (uv[:, 0], uv[:, 1]), 1.0)
    return image


def build_embedding(cloud: Union[SurfelCloud, np.ndarray], history: Sequence[Pose],
                    center: Pose, spec: WindowSpec) -> ExplorationEmbedding:
    cropped = crop_filter(cloud, center, spec)
    return ExplorationEmbedding(
        slices=slice_densities(cropped, center, spec),
        trajectory=trajectory_histogram(history, center, spec),
        center=center,
    )


def dump_embedding(embedding: ExplorationEmbedding, out_dir: Path, prefix: str = "embedding") -> List[Path]:
    """Отладочный вывод: по одному PNG в оттенках серого на канал"""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = list(embedding.slices) + [embedding.trajectory]
    names = [f"slice{k}" for k in range(len(embedding.slices))] + ["trajectory"]
    written = []
    for name, channel in zip(names, channels):
        peak = channel.max()
        scaled = (channel / peak * 255.0) if peak > 0 else channel
        # [u, v] -> строки по v, столбцы по u
        img = Image.fromarray(np.ascontiguousarray(scaled.T).astype(np.uint8))
        path = out_dir / f"{prefix}_{name}.png"
        img.save(path)
        written.append(path)
    return written
