"""
Общие геометрические типы: поза агента и окно, центрированное на агенте.

Соглашение об осях: X: восток (индекс сетки i), Y: вверх, Z: индекс сетки j.
Массивы сцены индексируются [i, j], массивы окна: [u, v].
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

N_YAWS = 8  # шаг поворота 45°

Cell = Tuple[int, int]


@dataclass(frozen=True, order=True)
class Pose:
    """Состояние камеры агента: клетка навигационной сетки и индекс рыскания"""
    cell: Cell
    yaw_index: int = 0

    def __post_init__(self):
        if not 0 <= self.yaw_index < N_YAWS:
            raise ValueError(f"yaw_index должен быть в [0, {N_YAWS}), получено {self.yaw_index}")
        object.__setattr__(self, 'cell', (int(self.cell[0]), int(self.cell[1])))

    @property
    def yaw(self) -> float:
        """Угол рыскания в радианах, отсчет от +X к +Z"""
        return self.yaw_index * (2.0 * math.pi / N_YAWS)

    def position(self, cell_size: float, agent_height: float) -> np.ndarray:
        """3D-положение камеры (центр клетки на высоте агента)"""
        i, j = self.cell
        return np.array([(i + 0.5) * cell_size, agent_height, (j + 0.5) * cell_size], dtype=np.float64)

    def with_cell(self, cell: Cell) -> "Pose":
        return Pose(cell, self.yaw_index)

    def with_yaw(self, yaw_index: int) -> "Pose":
        return Pose(self.cell, yaw_index % N_YAWS)


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def heading_yaw(src: Cell, dst: Cell) -> Optional[int]:
    """Индекс рыскания, смотрящий вдоль хода src -> dst (None для стояния на месте)"""
    di, dj = dst[0] - src[0], dst[1] - src[1]
    if di == 0 and dj == 0:
        return None
    angle = math.atan2(dj, di) % (2.0 * math.pi)
    return int(round(angle / (2.0 * math.pi / N_YAWS))) % N_YAWS


@dataclass(frozen=True)
class WindowSpec:
    """Квадратное окно вокруг агента для вложения, карты ценности и карты препятствий"""
    extent: float = 16.0
    grid: int = 32
    slices: int = 4
    y_min: float = 0.0
    y_max: float = 3.0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent должен быть > 0")
        if self.slices < 1:
            raise ValueError("число срезов K должно быть >= 1")
        if self.grid <= 0 or self.grid % 2:
            raise ValueError(f"размер сетки окна должен быть четным, получено {self.grid}")
        if self.y_max <= self.y_min:
            raise ValueError("y_max должен быть больше y_min")

    @property
    def radius(self) -> float:
        return self.extent / 2.0

    @property
    def cell(self) -> float:
        return self.extent / self.grid

    @property
    def h_slice(self) -> float:
        return (self.y_max - self.y_min) / self.slices

    @property
    def half(self) -> int:
        return self.grid // 2

    def origin(self, center: Pose) -> Cell:
        """Клетка сцены, соответствующая пикселю (0, 0) окна"""
        return center.cell[0] - self.half, center.cell[1] - self.half

    def cell_to_window(self, cell: Cell, center: Pose) -> Optional[Tuple[int, int]]:
        oi, oj = self.origin(center)
        u, v = cell[0] - oi, cell[1] - oj
        if 0 <= u < self.grid and 0 <= v < self.grid:
            return u, v
        return None

    def window_to_cell(self, u: int, v: int, center: Pose) -> Cell:
        oi, oj = self.origin(center)
        return oi + u, oj + v

    def matches_scene(self, cell_size: float) -> bool:
        """Окно в клетках сцены: один пиксель = одна клетка"""
        return math.isclose(self.cell, cell_size, rel_tol=1e-9)
