"""
Принятие решений: выбор цели по карте ценности (Больцман при обучении, argmax при
выводе), маршрут Дейкстры по карте препятствий, ориентации вдоль пути,
перепланирование при столкновении, а также базовые стратегии Random, FBE и
жадный NBV.
"""
import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from coverage import CoverageConfig, CoverageTracker
from errors import PlanningError, PoseError
from geometry import N_YAWS, Cell, Pose, WindowSpec, heading_yaw, manhattan
from logger import get_logger
from sensor import (CameraModel, SurfelCloud, backproject_from, interpolated_views,
                    render_depth_from)
from worldgen import NEIGHBORS_4, Scene, obstacle_slice

Path = List[Pose]

UNKNOWN, FREE, OBSTACLE = 0, 1, 2


@dataclass(frozen=True, eq=False)
class ValueMap:
    values: np.ndarray  # (G, G, N_c)
    window: WindowSpec
    center: Pose

    def __post_init__(self):
        expected = (self.window.grid, self.window.grid, N_YAWS)
        if self.values.shape != expected:
            raise PlanningError(f"карта ценности {self.values.shape}, ожидалось {expected}")
        if not np.all(np.isfinite(self.values)):
            raise PlanningError("карта ценности содержит не конечные значения")

    def pose_at(self, flat_index: int) -> Pose:
        u, v, yaw = np.unravel_index(int(flat_index), self.values.shape)
        return Pose(self.window.window_to_cell(int(u), int(v), self.center), int(yaw))

    def index_of(self, pose: Pose) -> Optional[int]:
        uv = self.window.cell_to_window(pose.cell, self.center)
        if uv is None:
            return None
        return int(np.ravel_multi_index((uv[0], uv[1], pose.yaw_index), self.values.shape))


@dataclass(frozen=True, eq=False)
class ObstacleMap:
    probs: np.ndarray  # (G, G), вероятность препятствия
    window: WindowSpec
    center: Pose
    threshold: float = 0.5

    def __post_init__(self):
        if self.probs.shape != (self.window.grid, self.window.grid):
            raise PlanningError(f"карта препятствий {self.probs.shape} не совпадает с окном")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise PlanningError("вероятности препятствий должны быть в [0, 1]")

    def blocked(self) -> np.ndarray:
        """Бинаризация по порогу; клетка агента всегда свободна"""
        grid = self.probs >= self.threshold
        grid[self.window.half, self.window.half] = False
        return grid

    @classmethod
    def from_grid(cls, grid: np.ndarray, window: WindowSpec, center: Pose,
                  threshold: float = 0.5) -> "ObstacleMap":
        return cls(probs=np.asarray(grid, dtype=np.float64), window=window, center=center,
                   threshold=threshold)


class HaltReason(str, Enum):
    PATH_COMPLETE = 'path-complete'
    COLLISION = 'collision-replan'
    BUDGET = 'budget'
    INVALID_STEP = 'invalid-step'


class KnownMap:
    """Тристабильная карта клеток {unknown, free, obstacle} по наблюдениям и пройденным клеткам"""

    def __init__(self, shape: Tuple[int, int], cell_size: float, wall_height: float):
        self.state = np.zeros(shape, dtype=np.int8)
        self.traversed = np.zeros(shape, dtype=bool)
        self.cell_size = cell_size
        self.wall_height = wall_height

    def mark_traversed(self, cell: Cell):
        self.traversed[cell] = True
        self.state[cell] = FREE

    def update(self, points: np.ndarray, origin: np.ndarray):
        """Точка, сдвинутая чуть дальше вдоль луча, попадает внутрь твердого вокселя:
        ниже пола/выше потолка: клетка свободна, иначе: препятствие"""
        if len(points) == 0:
            return
        ray = points - origin
        ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-12)
        nudged = points + ray * (0.01 * self.cell_size)
        cells = np.floor(nudged[:, [0, 2]] / self.cell_size).astype(np.int64)
        nx, nz = self.state.shape
        ok = (cells[:, 0] >= 0) & (cells[:, 0] < nx) & (cells[:, 1] >= 0) & (cells[:, 1] < nz)
        cells, y = cells[ok], nudged[ok, 1]
        plane = (y <= 0.0) | (y >= self.wall_height)

        free = cells[plane]
        fi, fj = free[:, 0], free[:, 1]
        unknown = self.state[fi, fj] == UNKNOWN
        self.state[fi[unknown], fj[unknown]] = FREE

        solid = cells[~plane]
        si, sj = solid[:, 0], solid[:, 1]
        keep = ~self.traversed[si, sj]
        self.state[si[keep], sj[keep]] = OBSTACLE

    def free_mask(self) -> np.ndarray:
        return self.state == FREE

    def is_frontier(self, cell: Cell) -> bool:
        if self.state[cell] != FREE:
            return False
        nx, nz = self.state.shape
        for di, dj in NEIGHBORS_4:
            ni, nj = cell[0] + di, cell[1] + dj
            if 0 <= ni < nx and 0 <= nj < nz and self.state[ni, nj] == UNKNOWN:
                return True
        return False


class AgentState:
    """Состояние эпизода: поза, облако P_t, покрытие, история, известная карта"""

    def __init__(self, scene: Scene, start: Pose, cam: CameraModel, cov_cfg: CoverageConfig,
                 noise_std: float = 0.0, interp_frames: int = 0,
                 rng: Optional[np.random.Generator] = None, tracker: Optional[CoverageTracker] = None):
        if not scene.is_traversable(start.cell):
            raise PoseError(f"стартовая поза {start} вне проходимой области")
        self.scene = scene
        self.cam = cam
        self.cov_cfg = cov_cfg
        self.noise_std = noise_std
        self.interp_frames = interp_frames
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.cloud = SurfelCloud(scene.cell_size)
        self.tracker = tracker.copy() if tracker is not None else CoverageTracker(scene.gt_surfels, cov_cfg)
        self.known = KnownMap(scene.shape, scene.cell_size, scene.wall_height)
        self.history: List[Pose] = []
        self.pose = start
        self.steps = 0
        self.observe(start)

    @property
    def coverage(self) -> float:
        return self.tracker.value

    def view_points(self, origin: np.ndarray, yaw: float) -> np.ndarray:
        depth = render_depth_from(self.scene, origin, yaw, self.cam, self.noise_std, self.rng)
        return backproject_from(depth, origin, yaw, self.cam)

    def _integrate_view(self, origin: np.ndarray, yaw: float) -> np.ndarray:
        points = self.view_points(origin, yaw)
        inserted = self.cloud.insert(points)
        self.tracker.update(inserted)
        self.known.update(points, origin)
        return inserted

    def observe(self, pose: Pose, previous: Optional[Pose] = None):
        """Рендер, обратная проекция и накопление для новой позы (и промежуточных кадров)"""
        added = []
        if previous is not None and self.interp_frames > 0:
            for origin, yaw in interpolated_views(self.scene, previous, pose, self.interp_frames):
                added.append(self._integrate_view(origin, yaw))
        origin = pose.position(self.scene.cell_size, self.scene.agent_height)
        added.append(self._integrate_view(origin, pose.yaw))
        self.last_inserted = np.concatenate(added, axis=0)
        self.known.mark_traversed(pose.cell)
        self.history.append(pose)
        self.pose = pose

    def step_to(self, pose: Pose):
        previous = self.pose
        self.steps += 1
        self.observe(pose, previous)


@dataclass
class ExecutionResult:
    steps: int
    halt: HaltReason
    executed: List[Pose] = field(default_factory=list)


# --- Больцман и argmax ---

def boltzmann_probs(values: np.ndarray, beta: float) -> np.ndarray:
    """P(c) = exp(M[c]/β) / Σ exp(M[c']/β) с вычитанием максимума; -inf означает исключенную клетку"""
    if beta <= 0:
        raise PlanningError("температура β должна быть > 0")
    flat = np.asarray(values, dtype=np.float64).ravel()
    if np.any(np.isnan(flat)) or np.any(flat == np.inf):
        raise PlanningError("значения карты должны быть конечными")
    peak = np.max(flat)
    if peak == -np.inf:
        raise PlanningError("все клетки исключены")
    weights = np.exp((flat - peak) / beta)
    return weights / weights.sum()


def boltzmann_index(values: np.ndarray, beta: float, rng: np.random.Generator) -> int:
    probs = boltzmann_probs(values, beta)
    return int(rng.choice(len(probs), p=probs))


def boltzmann_sample(m: ValueMap, beta: float, rng: np.random.Generator) -> Pose:
    return m.pose_at(boltzmann_index(m.values, beta, rng))


def argmax_index(values: np.ndarray) -> int:
    """Максимум; при равенстве: наименьший плоский индекс"""
    return int(np.argmax(np.asarray(values).ravel()))


def argmax_goal(m: ValueMap) -> Pose:
    return m.pose_at(argmax_index(m.values))


# --- маршрутизация ---

def dijkstra_tree(blocked: np.ndarray, start: Cell,
                  goal: Optional[Cell] = None) -> Tuple[Dict[Cell, int], Dict[Cell, Optional[Cell]]]:
    """Дейкстра с единичными весами по 4-связности на свободных клетках"""
    rows, cols = blocked.shape
    distances: Dict[Cell, int] = {start: 0}
    previous: Dict[Cell, Optional[Cell]] = {start: None}
    queue = [(0, start)]
    while queue:
        dist, node = heapq.heappop(queue)
        if dist > distances[node]:
            continue
        if node == goal:
            break
        for di, dj in NEIGHBORS_4:
            nb = (node[0] + di, node[1] + dj)
            if 0 <= nb[0] < rows and 0 <= nb[1] < cols and not blocked[nb]:
                nd = dist + 1
                if nb not in distances or nd < distances[nb]:
                    distances[nb] = nd
                    previous[nb] = node
                    heapq.heappush(queue, (nd, nb))
    return distances, previous


def reconstruct(previous: Dict[Cell, Optional[Cell]], goal: Cell) -> List[Cell]:
    path = []
    node: Optional[Cell] = goal
    while node is not None:
        path.append(node)
        node = previous[node]
    return path[::-1]


def grid_dijkstra(blocked: np.ndarray, start: Cell, goal: Cell) -> Optional[List[Cell]]:
    """Кратчайший путь на сетке [u, v]; None если цель занята или недостижима"""
    rows, cols = blocked.shape
    if not (0 <= start[0] < rows and 0 <= start[1] < cols) or blocked[start]:
        raise PlanningError(f"стартовая клетка {start} занята")
    if not (0 <= goal[0] < rows and 0 <= goal[1] < cols) or blocked[goal]:
        return None
    _, previous = dijkstra_tree(blocked, start, goal)
    if goal not in previous:
        return None
    return reconstruct(previous, goal)


def dijkstra_path(o: ObstacleMap, start_cell: Cell, goal_cell: Cell) -> Optional[List[Cell]]:
    """Кратчайший путь в мировых клетках по бинаризованной карте препятствий"""
    start = o.window.cell_to_window(start_cell, o.center)
    if start is None:
        raise PlanningError(f"стартовая клетка {start_cell} вне окна")
    goal = o.window.cell_to_window(goal_cell, o.center)
    if goal is None:
        return None
    blocked = o.probs >= o.threshold
    if start == (o.window.half, o.window.half):
        blocked[start] = False
    path = grid_dijkstra(blocked, start, goal)
    if path is None:
        return None
    return [o.window.window_to_cell(u, v, o.center) for u, v in path]


def assign_orientations(positions: Sequence[Cell], m: ValueMap, mode: str = 'argmax',
                        beta: float = 0.1, rng: Optional[np.random.Generator] = None) -> Path:
    """Ориентация для каждой позиции по ее N_c значениям: выборка Больцмана или argmax"""
    if mode not in ('sample', 'argmax'):
        raise PlanningError(f"неизвестный режим ориентаций '{mode}'")
    if mode == 'sample' and rng is None:
        raise PlanningError("для режима sample нужен rng")
    path = []
    for cell in positions:
        uv = m.window.cell_to_window(cell, m.center)
        if uv is None:
            raise PlanningError(f"позиция {cell} вне окна карты ценности")
        channel = m.values[uv[0], uv[1]]
        yaw = boltzmann_index(channel, beta, rng) if mode == 'sample' else argmax_index(channel)
        path.append(Pose(cell, yaw))
    return path


def execute_path(state: AgentState, path: Path, scene: Scene, budget: int,
                 observer: Optional[Callable[[AgentState], None]] = None) -> ExecutionResult:
    """Движение поза за позой; препятствие сцены на пути останавливает исполнение без траты шага.

    Соседние позы пути должны совпадать по клетке или быть 4-соседями, иначе INVALID_STEP.
    """
    if not path or path[0].cell != state.pose.cell:
        raise PlanningError("путь должен начинаться с текущей позы агента")
    result = ExecutionResult(steps=0, halt=HaltReason.PATH_COMPLETE)
    for pose in path[1:]:
        if result.steps >= budget:
            result.halt = HaltReason.BUDGET
            return result
        if manhattan(state.pose.cell, pose.cell) > 1:
            result.halt = HaltReason.INVALID_STEP
            return result
        if not scene.is_traversable(pose.cell):
            result.halt = HaltReason.COLLISION
            return result
        state.step_to(pose)
        result.steps += 1
        result.executed.append(pose)
        if observer is not None:
            observer(state)
    return result


# --- эвристики ---

def frontier_goal(known: KnownMap, agent_cell: Cell) -> Optional[Cell]:
    """BFS по известным свободным клеткам до ближайшей клетки, граничащей с неизвестной"""
    free = known.free_mask()
    free[agent_cell] = True
    distances, _ = dijkstra_tree(~free, agent_cell)
    best: Optional[Tuple[int, Cell]] = None
    for cell, dist in distances.items():
        if known.is_frontier(cell) or (cell == agent_cell and _touches_unknown(known, cell)):
            if best is None or (dist, cell) < best:
                best = (dist, cell)
    return None if best is None else best[1]


def _touches_unknown(known: KnownMap, cell: Cell) -> bool:
    nx, nz = known.state.shape
    return any(0 <= cell[0] + di < nx and 0 <= cell[1] + dj < nz
               and known.state[cell[0] + di, cell[1] + dj] == UNKNOWN
               for di, dj in NEIGHBORS_4)


def route_on_known(known: KnownMap, start: Cell, goal: Cell) -> Optional[List[Cell]]:
    free = known.free_mask()
    free[start] = True
    return grid_dijkstra(~free, start, goal)


def headed_path(cells: Sequence[Cell], start: Pose, final_yaw: Optional[int] = None) -> Path:
    """Ориентация по направлению движения; на месте: сохраняется предыдущая"""
    path = [start]
    yaw = start.yaw_index
    for prev, cell in zip(cells[:-1], cells[1:]):
        heading = heading_yaw(prev, cell)
        yaw = heading if heading is not None else yaw
        path.append(Pose(cell, yaw))
    if final_yaw is not None and len(path) > 1:
        path[-1] = path[-1].with_yaw(final_yaw)
    return path


def random_policy(state: AgentState, rng: np.random.Generator) -> Pose:
    """Равномерно среди допустимых одношаговых перемещений (4 направления × 8 рысканий)"""
    options = []
    for di, dj in NEIGHBORS_4:
        cell = (state.pose.cell[0] + di, state.pose.cell[1] + dj)
        if state.scene.is_traversable(cell):
            options.extend(Pose(cell, yaw) for yaw in range(N_YAWS))
    if not options:
        return state.pose.with_yaw(int(rng.integers(0, N_YAWS)))
    return options[int(rng.integers(0, len(options)))]


def candidate_poses(scene: Scene, agent_cell: Cell, radius: int) -> List[Pose]:
    """Позы в геодезическом радиусе radius, упорядоченные по (di, dj, yaw)"""
    cells = []
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if abs(di) + abs(dj) > radius:
                continue
            cell = (agent_cell[0] + di, agent_cell[1] + dj)
            if scene.is_traversable(cell):
                cells.append(cell)
    if radius > 1:
        distances, _ = dijkstra_tree(~scene.navgrid, agent_cell)
        cells = [c for c in cells if distances.get(c, radius + 1) <= radius]
    return [Pose(cell, yaw) for cell in cells for yaw in range(N_YAWS)]


def greedy_nbv_goal(state: AgentState, scene: Scene, candidate_radius: int = 1) -> Pose:
    """Поза с максимальным истинным одношаговым выигрышем покрытия (равенство: меньший индекс)"""
    best_pose, best_gain = None, -1
    for pose in candidate_poses(scene, state.pose.cell, candidate_radius):
        origin = pose.position(scene.cell_size, scene.agent_height)
        points = state.view_points(origin, pose.yaw)
        gain = state.tracker.peek_gain(state.cloud.novel(points))
        if gain > best_gain:
            best_pose, best_gain = pose, gain
    return best_pose if best_pose is not None else state.pose


# --- планировщики для эпизодов ---

class Planner:
    name = 'planner'

    def reset(self, rng: np.random.Generator):
        self.rng = rng

    def plan(self, state: AgentState) -> Path:
        raise NotImplementedError


class RandomPlanner(Planner):
    name = 'random'

    def plan(self, state: AgentState) -> Path:
        return [state.pose, random_policy(state, self.rng)]


class FrontierPlanner(Planner):
    name = 'fbe'

    def plan(self, state: AgentState) -> Path:
        goal = frontier_goal(state.known, state.pose.cell)
        cells = route_on_known(state.known, state.pose.cell, goal) if goal is not None else None
        if cells is None:
            return [state.pose, random_policy(state, self.rng)]
        if len(cells) == 1:
            # фронтир под агентом: поворот к неизвестному
            return [state.pose, state.pose.with_yaw(state.pose.yaw_index + N_YAWS // 4)]
        return headed_path(cells, state.pose)


class GreedyNBVPlanner(Planner):
    name = 'greedy-nbv'

    def __init__(self, radius: int = 1):
        self.radius = radius

    def plan(self, state: AgentState) -> Path:
        goal = greedy_nbv_goal(state, state.scene, self.radius)
        if goal.cell == state.pose.cell:
            return [state.pose, goal]
        cells = grid_dijkstra(~state.scene.navgrid, state.pose.cell, goal.cell)
        return headed_path(cells, state.pose, final_yaw=goal.yaw_index)


class NBPPlanner(Planner):
    """Цель по карте ценности, маршрут по карте препятствий, исполнение до остановки"""

    def __init__(self, predictor: Callable[[AgentState], "object"], window: WindowSpec,
                 mode: str = 'argmax', beta: float = 0.1, goal_retries: int = 32,
                 obstacle_source: str = 'predicted', refresh: bool = False, name: str = 'nbp'):
        self.predictor = predictor
        self.window = window
        self.mode = mode
        self.beta = beta
        self.goal_retries = goal_retries
        self.obstacle_source = obstacle_source
        self.refresh = refresh
        self.name = name
        self.logger = get_logger()

    def obstacle_map(self, state: AgentState, predicted: ObstacleMap) -> ObstacleMap:
        if self.obstacle_source == 'oracle':
            grid = obstacle_slice(state.scene, state.pose, self.window)
            return ObstacleMap.from_grid(grid, self.window, state.pose, predicted.threshold)
        return predicted

    def choose_path(self, state: AgentState, value_map: ValueMap, obstacles: ObstacleMap,
                    rng: np.random.Generator) -> Optional[Path]:
        """Цель (с отбраковкой недостижимых) и путь с ориентациями; None если цель не найдена"""
        blocked = obstacles.blocked()
        center = (self.window.half, self.window.half)
        distances, previous = dijkstra_tree(blocked, center)
        values = value_map.values.astype(np.float64).copy()
        for _ in range(self.goal_retries + 1):
            if self.mode == 'sample':
                index = boltzmann_index(values, self.beta, rng)
            else:
                index = argmax_index(values)
            goal = value_map.pose_at(index)
            u, v, _ = np.unravel_index(index, values.shape)
            if goal == state.pose:
                values.flat[index] = -np.inf
                continue
            if (int(u), int(v)) not in distances:
                values[u, v, :] = -np.inf
                continue
            cells = [self.window.window_to_cell(a, b, state.pose)
                     for a, b in reconstruct(previous, (int(u), int(v)))]
            path = assign_orientations(cells, value_map, self.mode, self.beta, rng)
            path[0] = state.pose
            path[-1] = goal
            if len(path) == 1:
                path = [state.pose, goal]
            return path
        return None

    def plan(self, state: AgentState) -> Path:
        prediction = self.predictor(state)
        obstacles = self.obstacle_map(state, prediction.obstacle_map)
        path = self.choose_path(state, prediction.value_map, obstacles, self.rng)
        if path is None:
            goal = frontier_goal(state.known, state.pose.cell)
            cells = route_on_known(state.known, state.pose.cell, goal) if goal is not None else None
            if cells is not None and len(cells) > 1:
                self.logger.debug(f"↩️  {self.name}: цель не найдена, переход к фронтиру {goal}")
                path = headed_path(cells, state.pose)
            else:
                path = [state.pose, random_policy(state, self.rng)]
        if self.refresh:
            path = path[:2]
        return path


def random_start_pose(scene: Scene, rng: np.random.Generator) -> Pose:
    """Равномерно по клеткам navgrid и рысканиям"""
    cells = scene.navigable_cells()
    if not cells:
        raise PoseError(f"в сцене {scene.scene_id} нет проходимых клеток")
    cell = cells[int(rng.integers(0, len(cells)))]
    return Pose(cell, int(rng.integers(0, N_YAWS)))
