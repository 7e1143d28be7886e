"""
Процедурная генерация 2.5D сцен (план + вытянутые стены + полосы окон)
и статистики сцены: поверхностные сэмплы GT, навигационная сложность,
срез препятствий на высоте агента.
"""
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import SceneFormatError, SceneGenerationError
from geometry import Cell, Pose, WindowSpec
from logger import get_logger

SCENE_FORMAT_VERSION = 1

# соседи по 4-связности и 6 направлений граней вокселя (ось i, ось k (вверх), ось j)
NEIGHBORS_4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
FACE_DIRECTIONS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class DifficultyParams:
    room_count_range: Tuple[int, int] = (4, 6)
    room_size_range: Tuple[float, float] = (2.0, 5.0)
    corridor_width: float = 1.0
    door_width: float = 1.0
    window_fraction: float = 0.2
    branching_factor: float = 0.3
    seed: int = 0
    grid_size: Tuple[int, int] = (32, 32)
    cell_size: float = 0.5
    wall_height: float = 3.0
    agent_height: float = 1.65
    max_retries: int = 200

    def validate(self):
        if self.room_size_range[0] < 2 * self.cell_size:
            raise ValueError("минимальный размер комнаты должен быть >= 2 * cell_size")
        if self.room_size_range[0] > self.room_size_range[1]:
            raise ValueError("room_size_range: min > max")
        if self.corridor_width < self.cell_size:
            raise ValueError("corridor_width должен быть >= cell_size")
        if not 0.0 <= self.window_fraction <= 1.0:
            raise ValueError("window_fraction должен быть в [0, 1]")
        if self.room_count_range[0] < 1 or self.room_count_range[0] > self.room_count_range[1]:
            raise ValueError("room_count_range должен быть парой 1 <= min <= max")
        if not 0.0 < self.agent_height < self.wall_height:
            raise ValueError("agent_height должен лежать между полом и потолком")


@dataclass(frozen=True, eq=False)
class Scene:
    """Неизменяемая сцена; массивы [i, j] (ось X, ось Z)"""
    wall_grid: np.ndarray
    navgrid: np.ndarray
    window_bands: Dict[Cell, Tuple[float, float]] = field(default_factory=dict)
    cell_size: float = 0.5
    wall_height: float = 3.0
    agent_height: float = 1.65
    scene_id: str = ""

    def __post_init__(self):
        wall = np.array(self.wall_grid, dtype=bool)
        nav = np.array(self.navgrid, dtype=bool)
        if wall.shape != nav.shape or wall.ndim != 2:
            raise ValueError("wall_grid и navgrid должны быть 2D одного размера")
        wall.setflags(write=False)
        nav.setflags(write=False)
        object.__setattr__(self, 'wall_grid', wall)
        object.__setattr__(self, 'navgrid', nav)
        object.__setattr__(self, 'window_bands', dict(sorted(self.window_bands.items())))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (np.array_equal(self.wall_grid, other.wall_grid)
                and np.array_equal(self.navgrid, other.navgrid)
                and self.window_bands == other.window_bands
                and self.cell_size == other.cell_size
                and self.wall_height == other.wall_height
                and self.agent_height == other.agent_height)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.wall_grid.shape

    @property
    def n_levels(self) -> int:
        return int(round(self.wall_height / self.cell_size))

    @property
    def y_min(self) -> float:
        return 0.0

    @property
    def y_max(self) -> float:
        return self.wall_height

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.shape[0] and 0 <= cell[1] < self.shape[1]

    def is_traversable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and bool(self.navgrid[cell])

    def navigable_cells(self) -> List[Cell]:
        return [(int(i), int(j)) for i, j in np.argwhere(self.navgrid)]

    @cached_property
    def solid_voxels(self) -> np.ndarray:
        """Занятость вокселей [i, k, j] с рамкой толщиной 1 (пол, потолок, границы: твердые)"""
        nx, nz = self.shape
        nk = self.n_levels
        solid = np.ones((nx + 2, nk + 2, nz + 2), dtype=bool)
        inner = np.repeat(self.wall_grid[:, None, :], nk, axis=1)
        centers = (np.arange(nk) + 0.5) * self.cell_size
        for (i, j), (z_lo, z_hi) in self.window_bands.items():
            open_levels = (centers >= z_lo) & (centers < z_hi)
            inner[i, open_levels, j] = False
        solid[1:-1, 1:-1, 1:-1] = inner
        solid.setflags(write=False)
        return solid

    @cached_property
    def gt_surfels(self) -> np.ndarray:
        return gt_surface_points(self)


class RectangularRoom:
    """Прямоугольная комната: (x1, y1): угол стены, внутренность без стен"""

    def __init__(self, x: int, y: int, width: int, height: int):
        self.x1 = x
        self.y1 = y
        self.x2 = x + width + 1
        self.y2 = y + height + 1

    @property
    def center(self) -> Cell:
        return (self.x1 + self.x2) // 2, (self.y1 + self.y2) // 2

    @property
    def inner(self) -> Tuple[slice, slice]:
        return slice(self.x1 + 1, self.x2), slice(self.y1 + 1, self.y2)

    def intersects(self, other: "RectangularRoom") -> bool:
        # стены соседних комнат могут совпадать, внутренности никогда
        return (self.x1 < other.x2 and self.x2 > other.x1
                and self.y1 < other.y2 and self.y2 > other.y1)

    def on_ring(self, cell: Cell) -> bool:
        """Клетка лежит на стенном контуре комнаты"""
        i, j = cell
        inside_outer = self.x1 <= i <= self.x2 and self.y1 <= j <= self.y2
        inside_inner = self.x1 < i < self.x2 and self.y1 < j < self.y2
        return inside_outer and not inside_inner


class SceneGenerator:
    """Генератор комнат и коридоров; чистая функция от DifficultyParams"""

    def __init__(self, params: DifficultyParams):
        params.validate()
        self.params = params
        self.logger = get_logger()
        self.rng = np.random.default_rng(params.seed)
        self.cell_size = params.cell_size

    def _cells(self, meters: float) -> int:
        return max(1, int(round(meters / self.cell_size)))

    def _place_rooms(self) -> List[RectangularRoom]:
        p = self.params
        nx, nz = p.grid_size
        wanted = int(self.rng.integers(p.room_count_range[0], p.room_count_range[1] + 1))
        size_lo = max(2, int(math.ceil(p.room_size_range[0] / self.cell_size - 1e-9)))
        size_hi = max(size_lo, int(math.floor(p.room_size_range[1] / self.cell_size + 1e-9)))

        rooms: List[RectangularRoom] = []
        for _ in range(p.max_retries):
            if len(rooms) == wanted:
                break
            w = int(self.rng.integers(size_lo, size_hi + 1))
            h = int(self.rng.integers(size_lo, size_hi + 1))
            if w + 2 > nx or h + 2 > nz:
                continue
            x = int(self.rng.integers(0, nx - w - 1))
            y = int(self.rng.integers(0, nz - h - 1))
            room = RectangularRoom(x, y, w, h)
            if any(room.intersects(other) for other in rooms):
                continue
            rooms.append(room)

        if len(rooms) < p.room_count_range[0]:
            raise SceneGenerationError(p.seed, f"размещено {len(rooms)} комнат из минимума "
                                               f"{p.room_count_range[0]} (seed={p.seed})")
        return rooms

    def _links(self, rooms: List[RectangularRoom]) -> List[Tuple[int, int]]:
        """Остовное дерево (Прим по центрам) плюс дополнительные связи"""
        n = len(rooms)
        if n < 2:
            return []
        centers = np.array([r.center for r in rooms], dtype=np.float64)
        dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)

        in_tree = {0}
        links: List[Tuple[int, int]] = []
        while len(in_tree) < n:
            best = None
            for a in sorted(in_tree):
                for b in range(n):
                    if b in in_tree:
                        continue
                    if best is None or dist[a, b] < dist[best[0], best[1]]:
                        best = (a, b)
            links.append(best)
            in_tree.add(best[1])

        tree = {tuple(sorted(link)) for link in links}
        spare = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in tree]
        extra = min(len(spare), int(round(self.params.branching_factor * n)))
        if extra:
            # короткие связи вероятнее: берем из ближайшей половины кандидатов
            spare.sort(key=lambda ab: (dist[ab[0], ab[1]], ab))
            pool = spare[:max(extra, len(spare) // 2)]
            chosen = self.rng.choice(len(pool), size=extra, replace=False)
            links.extend(pool[int(c)] for c in sorted(chosen))
        return links

    def _carve_corridor(self, free: np.ndarray, rooms: List[RectangularRoom],
                        start: Cell, end: Cell):
        """L-образный коридор; на стенах комнат проем сужается до ширины двери"""
        nx, nz = free.shape
        width = self._cells(self.params.corridor_width)
        door = min(width, self._cells(self.params.door_width))
        (x1, y1), (x2, y2) = start, end
        if self.rng.random() < 0.5:
            corner = (x2, y1)
        else:
            corner = (x1, y2)

        for (ax, ay), (bx, by) in ((start, corner), (corner, end)):
            horizontal = ay == by
            steps = max(abs(bx - ax), abs(by - ay))
            for t in range(steps + 1):
                cx = ax + (np.sign(bx - ax) * t if horizontal else 0)
                cy = ay + (0 if horizontal else np.sign(by - ay) * t)
                for offset in range(width):
                    i, j = (cx, cy + offset) if horizontal else (cx + offset, cy)
                    if not (1 <= i < nx - 1 and 1 <= j < nz - 1):
                        continue
                    if offset >= door and any(room.on_ring((i, j)) for room in rooms):
                        continue
                    free[i, j] = True

    def _largest_component(self, free: np.ndarray) -> np.ndarray:
        seen = np.zeros_like(free)
        best: List[Cell] = []
        for start in map(tuple, np.argwhere(free)):
            if seen[start]:
                continue
            component = flood_fill(free, start)
            for cell in component:
                seen[cell] = True
            if len(component) > len(best):
                best = component
        mask = np.zeros_like(free)
        for cell in best:
            mask[cell] = True
        return mask

    def _window_bands(self, free: np.ndarray) -> Dict[Cell, Tuple[float, float]]:
        p = self.params
        nx, nz = free.shape
        candidates: List[Cell] = []
        for i in range(1, nx - 1):
            for j in range(1, nz - 1):
                if free[i, j]:
                    continue
                if (free[i - 1, j] and free[i + 1, j]) or (free[i, j - 1] and free[i, j + 1]):
                    candidates.append((i, j))
        count = int(round(p.window_fraction * len(candidates)))
        if count == 0:
            return {}

        cs = self.cell_size
        n_levels = int(round(p.wall_height / cs))
        agent_level = int(math.floor(p.agent_height / cs))
        # полосы выровнены по вокселям и не пересекают уровень агента
        options = []
        if agent_level >= 2:
            options.append((cs, agent_level * cs))
        if n_levels - 1 > agent_level + 1:
            options.append(((agent_level + 1) * cs, (n_levels - 1) * cs))
        if not options:
            return {}

        chosen = self.rng.choice(len(candidates), size=count, replace=False)
        bands = {}
        for idx in sorted(int(c) for c in chosen):
            band = options[int(self.rng.integers(0, len(options)))]
            bands[candidates[idx]] = band
        return bands

    def generate(self) -> Scene:
        p = self.params
        free = np.zeros(p.grid_size, dtype=bool)
        rooms = self._place_rooms()
        for room in rooms:
            free[room.inner] = True
        for a, b in self._links(rooms):
            self._carve_corridor(free, rooms, rooms[a].center, rooms[b].center)

        navgrid = self._largest_component(free)
        windows = self._window_bands(navgrid)
        scene = Scene(wall_grid=~navgrid, navgrid=navgrid, window_bands=windows,
                      cell_size=p.cell_size, wall_height=p.wall_height, agent_height=p.agent_height,
                      scene_id=f"scene-{p.seed}")
        self.logger.debug(f"🏗️  Сцена {scene.scene_id}: {len(rooms)} комнат, "
                          f"{int(navgrid.sum())} проходимых клеток, {len(windows)} окон")
        return scene


def generate_scene(params: DifficultyParams) -> Scene:
    return SceneGenerator(params).generate()


def generate_scene_with_retries(params: DifficultyParams, attempts: int = 16) -> Scene:
    """Повторяет генерацию с seed+1 при неудачном размещении"""
    from dataclasses import replace
    last: Optional[SceneGenerationError] = None
    for k in range(attempts):
        try:
            return generate_scene(replace(params, seed=params.seed + k))
        except SceneGenerationError as e:
            last = e
            get_logger().debug(f"⚠️  {e}")
    raise last


# --- обходы сетки ---

def flood_fill(free: np.ndarray, start: Cell) -> List[Cell]:
    """Компонента 4-связности, содержащая start"""
    if not free[start]:
        return []
    nx, nz = free.shape
    seen = {start}
    queue = deque([start])
    order = []
    while queue:
        cell = queue.popleft()
        order.append(cell)
        for di, dj in NEIGHBORS_4:
            nb = (cell[0] + di, cell[1] + dj)
            if 0 <= nb[0] < nx and 0 <= nb[1] < nz and free[nb] and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return order


def grid_bfs(free: np.ndarray, start: Cell) -> np.ndarray:
    """Геодезические расстояния в клетках (-1: недостижимо)"""
    nx, nz = free.shape
    dist = np.full(free.shape, -1, dtype=np.int64)
    if not free[start]:
        return dist
    dist[start] = 0
    queue = deque([start])
    while queue:
        ci, cj = queue.popleft()
        d = dist[ci, cj] + 1
        for di, dj in NEIGHBORS_4:
            ni, nj = ci + di, cj + dj
            if 0 <= ni < nx and 0 <= nj < nz and free[ni, nj] and dist[ni, nj] < 0:
                dist[ni, nj] = d
                queue.append((ni, nj))
    return dist


# --- статистика сцены ---

def gt_surface_points(scene: Scene) -> np.ndarray:
    """Центры граней свободных вокселей, граничащих с твердым (стены, пол, потолок).

    Свободные воксели: столбцы navgrid и окна в стенах; прочие клетки без стен поверхностей не дают.
    """
    solid = scene.solid_voxels
    columns = (scene.navgrid | scene.wall_grid)[:, None, :]
    free = ~solid[1:-1, 1:-1, 1:-1] & columns
    cs = scene.cell_size
    chunks = []
    for d in FACE_DIRECTIONS:
        di, dk, dj = d
        neighbor = solid[1 + di:solid.shape[0] - 1 + di,
                         1 + dk:solid.shape[1] - 1 + dk,
                         1 + dj:solid.shape[2] - 1 + dj]
        idx = np.argwhere(free & neighbor)
        if len(idx):
            chunks.append((idx + 0.5 + 0.5 * np.array(d)) * cs)
    if not chunks:
        return np.zeros((0, 3))
    points = np.concatenate(chunks, axis=0)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return points[order]


def nav_complexity(scene: Scene, sample_fraction: float, seed: int) -> float:
    """Максимум отношения геодезического расстояния к евклидову по выборке пар.

    При sample_fraction < 1 это оценка снизу.
    """
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction должен быть в (0, 1]")
    cells = scene.navigable_cells()
    n = len(cells)
    if n < 2:
        raise ValueError("для навигационной сложности нужно >= 2 проходимых клеток")

    first, second = np.triu_indices(n, k=1)
    total = len(first)
    if sample_fraction < 1.0:
        rng = np.random.default_rng(seed)
        m = max(1, int(round(sample_fraction * total)))
        picked = np.sort(rng.choice(total, size=m, replace=False))
        first, second = first[picked], second[picked]

    coords = np.array(cells, dtype=np.int64)
    best = 0.0
    for src in np.unique(first):
        targets = second[first == src]
        dist = grid_bfs(scene.navgrid, cells[src])
        tgt = coords[targets]
        geodesic = dist[tgt[:, 0], tgt[:, 1]].astype(np.float64)
        euclid = np.hypot(tgt[:, 0] - coords[src, 0], tgt[:, 1] - coords[src, 1])
        best = max(best, float(np.max(geodesic / euclid)))
    return best


def obstacle_slice(scene: Scene, center: Pose, window: WindowSpec) -> np.ndarray:
    """Пересечение сцены с плоскостью на высоте агента в окне [u, v]; True: препятствие"""
    if not window.matches_scene(scene.cell_size):
        raise ValueError("клетка окна должна совпадать с клеткой сцены")
    blocked = scene.wall_grid.copy()
    h = scene.agent_height
    for cell, (z_lo, z_hi) in scene.window_bands.items():
        if z_lo <= h < z_hi:
            blocked[cell] = False

    oi, oj = window.origin(center)
    nx, nz = scene.shape
    out = np.ones((window.grid, window.grid), dtype=bool)
    i0, i1 = max(oi, 0), min(oi + window.grid, nx)
    j0, j1 = max(oj, 0), min(oj + window.grid, nz)
    if i0 < i1 and j0 < j1:
        out[i0 - oi:i1 - oi, j0 - oj:j1 - oj] = blocked[i0:i1, j0:j1]
    return out


# --- сериализация ---

def save_scene(scene: Scene, path: Path):
    """Текстовый формат: заголовок, битовая карта стен, таблица окон, navgrid"""
    nx, nz = scene.shape
    lines = [
        f"NBPSCENE {SCENE_FORMAT_VERSION}",
        f"scene_id={scene.scene_id}",
        f"cell_size={scene.cell_size!r}",
        f"dims={nx} {nz}",
        f"wall_height={scene.wall_height!r}",
        f"agent_height={scene.agent_height!r}",
        "[walls]",
    ]
    lines += ["".join('#' if scene.wall_grid[i, j] else '.' for i in range(nx)) for j in range(nz)]
    lines.append(f"[windows] {len(scene.window_bands)}")
    lines += [f"{i} {j} {lo!r} {hi!r}" for (i, j), (lo, hi) in scene.window_bands.items()]
    lines.append("[navgrid]")
    lines += ["".join('1' if scene.navgrid[i, j] else '0' for i in range(nx)) for j in range(nz)]
    Path(path).write_text("\n".join(lines) + "\n", encoding='utf-8')


def _rows(lines: Iterator[str], nx: int, nz: int, on: str) -> np.ndarray:
    grid = np.zeros((nx, nz), dtype=bool)
    for j in range(nz):
        row = next(lines)
        if len(row) != nx:
            raise SceneFormatError(f"строка {j} имеет длину {len(row)}, ожидалось {nx}")
        grid[:, j] = [ch == on for ch in row]
    return grid


def load_scene(path: Path) -> Scene:
    try:
        lines = iter(Path(path).read_text(encoding='utf-8').splitlines())
        magic = next(lines).split()
        if magic[0] != "NBPSCENE" or int(magic[1]) != SCENE_FORMAT_VERSION:
            raise SceneFormatError(f"неподдерживаемый заголовок: {' '.join(magic)}")
        header = {}
        for line in lines:
            if line == "[walls]":
                break
            key, _, value = line.partition('=')
            header[key] = value
        nx, nz = (int(v) for v in header['dims'].split())
        walls = _rows(lines, nx, nz, '#')
        count = int(next(lines).split()[1])
        windows = {}
        for _ in range(count):
            i, j, lo, hi = next(lines).split()
            windows[(int(i), int(j))] = (float(lo), float(hi))
        if next(lines) != "[navgrid]":
            raise SceneFormatError("ожидалась секция [navgrid]")
        nav = _rows(lines, nx, nz, '1')
    except (StopIteration, KeyError, IndexError, ValueError) as e:
        if isinstance(e, SceneFormatError):
            raise
        raise SceneFormatError(f"поврежденный файл сцены {path}: {e}")
    return Scene(wall_grid=walls, navgrid=nav, window_bands=windows,
                 cell_size=float(header['cell_size']), wall_height=float(header['wall_height']),
                 agent_height=float(header['agent_height']), scene_id=header.get('scene_id', ''))
