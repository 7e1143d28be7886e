"""
Данные для обучения: роллауты с выборкой целей по Больцману, метки ΔCov для всех
кратчайших подпутей, GT-карта препятствий и память воспроизведения.
"""
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from coverage import CoverageConfig, covered_count
from errors import NBPLabError, CheckpointError
from geometry import Pose, WindowSpec
from logger import get_logger
from planning import (AgentState, NBPPlanner, execute_path, frontier_goal, headed_path,
                      route_on_known)
from progress import ExplorationEmbedding, build_embedding
from sensor import CameraModel, SurfelCloud
from worldgen import Scene, obstacle_slice

MEMORY_MAGIC = b"NBPMEM\x00\x00"
MEMORY_VERSION = 1


@dataclass(eq=False)
class TrainingSample:
    slices: np.ndarray        # (K, G, G) float32
    trajectory: np.ndarray    # (G, G) float32
    center: Pose
    label_index: np.ndarray   # плоские индексы в (G, G, N_c)
    label_value: np.ndarray   # ΔCov, float64
    obstacle_gt: np.ndarray   # (G, G) bool
    step_index: int
    iteration: int = 0
    scene_id: str = ""

    @classmethod
    def from_embedding(cls, embedding: ExplorationEmbedding, labels: Dict[int, float],
                       obstacle_gt: np.ndarray, step_index: int, iteration: int = 0,
                       scene_id: str = "") -> "TrainingSample":
        order = sorted(labels)
        return cls(
            slices=embedding.slices.astype(np.float32),
            trajectory=embedding.trajectory.astype(np.float32),
            center=embedding.center,
            label_index=np.array(order, dtype=np.int64),
            label_value=np.array([labels[k] for k in order], dtype=np.float64),
            obstacle_gt=np.asarray(obstacle_gt, dtype=bool),
            step_index=step_index,
            iteration=iteration,
            scene_id=scene_id,
        )

    @property
    def embedding(self) -> ExplorationEmbedding:
        return ExplorationEmbedding(self.slices.astype(np.float64),
                                    self.trajectory.astype(np.float64), self.center)

    @property
    def n_labels(self) -> int:
        return len(self.label_index)

    def value_targets(self, shape) -> Tuple[np.ndarray, np.ndarray]:
        """Плотные цели и маска размеченных клеток"""
        target = np.zeros(int(np.prod(shape)))
        mask = np.zeros(int(np.prod(shape)), dtype=bool)
        target[self.label_index] = self.label_value
        mask[self.label_index] = True
        return target.reshape(shape), mask.reshape(shape)


@dataclass(frozen=True)
class RolloutContext:
    window: WindowSpec
    cam: CameraModel
    cov_cfg: CoverageConfig
    noise_std: float = 0.0
    interp_frames: int = 0
    goal_retries: int = 32
    obstacle_threshold: float = 0.5


class CloudDeltas:
    """Снимки облака вдоль пути в виде приращений: база + добавленные точки на каждой позе"""

    def __init__(self, base: SurfelCloud):
        self.base = base.copy()
        self.deltas: List[np.ndarray] = [np.zeros((0, 3))]

    def add(self, inserted: np.ndarray):
        self.deltas.append(np.asarray(inserted, dtype=np.float64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.deltas)

    def snapshot(self, i: int) -> SurfelCloud:
        cloud = self.base.copy()
        for delta in self.deltas[1:i + 1]:
            cloud.insert(delta)
        return cloud

    def snapshots(self) -> List[SurfelCloud]:
        return [self.snapshot(i) for i in range(len(self.deltas))]


@dataclass
class SegmentRecord:
    poses: List[Pose]
    counts: List[int]
    deltas: Optional[CloudDeltas] = None


def labels_from_counts(path: Sequence[Pose], counts: Sequence[int], total: int,
                       window: WindowSpec) -> List[Dict[int, float]]:
    """Для каждого старта c_i: {индекс c_j в окне c_i: (count_j - count_i) / N}"""
    if len(path) != len(counts):
        raise NBPLabError("число снимков не совпадает с числом поз пути")
    shape = (window.grid, window.grid, 8)
    result = []
    for i in range(len(path) - 1):
        labels: Dict[int, float] = {}
        for j in range(i + 1, len(path)):
            uv = window.cell_to_window(path[j].cell, path[i])
            if uv is None:
                continue
            index = int(np.ravel_multi_index((uv[0], uv[1], path[j].yaw_index), shape))
            labels[index] = (counts[j] - counts[i]) / total
        result.append(labels)
    return result


def subpath_gains(path: Sequence[Pose], cloud_snapshots: Sequence[SurfelCloud], gt: np.ndarray,
                  cfg: CoverageConfig, window: WindowSpec) -> List[Dict[int, float]]:
    """Метки ΔCov_{c_i -> c_j} = Cov(P_j) - Cov(P_i) для всех 0 <= i < j <= m"""
    if len(path) != len(cloud_snapshots):
        raise NBPLabError("снимки облака должны соответствовать позам пути")
    counts = [covered_count(gt, cloud, cfg) for cloud in cloud_snapshots]
    return labels_from_counts(path, counts, len(gt), window)


def obstacle_gt(scene: Scene, pose: Pose, window: WindowSpec) -> np.ndarray:
    return obstacle_slice(scene, pose, window)


def rollout_collect(scene: Scene, predictor: Callable, start: Pose, length: int, beta: float,
                    rng: np.random.Generator, ctx: RolloutContext, iteration: int = 0,
                    segments: Optional[List[SegmentRecord]] = None) -> List[TrainingSample]:
    """Роллаут: цель по Больцману, маршрут по GT-карте препятствий, метки по каждому сегменту"""
    if length <= 0:
        raise NBPLabError("длина роллаута должна быть > 0")
    logger = get_logger()
    planner = NBPPlanner(predictor, ctx.window, mode='sample', beta=beta,
                         goal_retries=ctx.goal_retries, obstacle_source='oracle', name='rollout')
    planner.reset(rng)
    state = AgentState(scene, start, ctx.cam, ctx.cov_cfg, ctx.noise_std, ctx.interp_frames, rng)
    samples: List[TrainingSample] = []

    while state.steps < length:
        prediction = predictor(state)
        obstacles = planner.obstacle_map(state, prediction.obstacle_map)
        path = planner.choose_path(state, prediction.value_map, obstacles, rng)
        if path is None:
            goal = frontier_goal(state.known, state.pose.cell)
            cells = route_on_known(state.known, state.pose.cell, goal) if goal is not None else None
            if cells is None or len(cells) < 2:
                logger.warning(f"⚠️  Роллаут {scene.scene_id}: нет достижимой цели, остановка на шаге {state.steps}")
                break
            path = headed_path(cells, state.pose)

        poses = [state.pose]
        counts = [state.tracker.count]
        steps_at = [state.steps]
        embeddings = [build_embedding(state.cloud, state.history, state.pose, ctx.window)]
        deltas = CloudDeltas(state.cloud) if segments is not None else None

        def observer(s: AgentState):
            poses.append(s.pose)
            counts.append(s.tracker.count)
            steps_at.append(s.steps)
            embeddings.append(build_embedding(s.cloud, s.history, s.pose, ctx.window))
            if deltas is not None:
                deltas.add(s.last_inserted)

        result = execute_path(state, path, scene, length - state.steps, observer)
        if result.steps == 0:
            break

        labels = labels_from_counts(poses, counts, state.tracker.total, ctx.window)
        for i, sample_labels in enumerate(labels):
            samples.append(TrainingSample.from_embedding(
                embeddings[i], sample_labels, obstacle_gt(scene, poses[i], ctx.window),
                step_index=steps_at[i], iteration=iteration, scene_id=scene.scene_id))
        if segments is not None:
            segments.append(SegmentRecord(poses=poses, counts=counts, deltas=deltas))

    logger.debug(f"📝 Роллаут {scene.scene_id}: {len(samples)} примеров, Cov={state.coverage:.3f}")
    return samples


class ReplayMemory:
    """Память воспроизведения с отложенной (holdout) выборкой"""

    def __init__(self):
        self.samples: List[TrainingSample] = []
        self.holdout: List[TrainingSample] = []

    def __len__(self) -> int:
        return len(self.samples)

    def add(self, samples: Sequence[TrainingSample], iteration: int):
        for sample in samples:
            sample.iteration = iteration
            self.samples.append(sample)

    def draw_holdout(self, samples: Sequence[TrainingSample], size: int,
                     rng: np.random.Generator) -> List[TrainingSample]:
        """Один раз откладывает до size примеров (не больше половины); возвращает остальные"""
        samples = list(samples)
        if self.holdout or size <= 0 or len(samples) < 2:
            return samples
        count = min(size, len(samples) // 2)
        picked = set(int(k) for k in rng.choice(len(samples), size=count, replace=False))
        self.holdout = [s for k, s in enumerate(samples) if k in picked]
        return [s for k, s in enumerate(samples) if k not in picked]

    def sample_older(self, count: int, rng: np.random.Generator) -> List[TrainingSample]:
        if count >= len(self.samples):
            return list(self.samples)
        picked = np.sort(rng.choice(len(self.samples), size=count, replace=False))
        return [self.samples[int(k)] for k in picked]

    # --- файл: заголовок с версией и записи с префиксом длины ---

    @staticmethod
    def _encode(sample: TrainingSample, holdout: bool) -> bytes:
        buffer = io.BytesIO()
        np.savez(buffer,
                 slices=sample.slices, trajectory=sample.trajectory,
                 center=np.array([sample.center.cell[0], sample.center.cell[1], sample.center.yaw_index]),
                 label_index=sample.label_index, label_value=sample.label_value,
                 obstacle_gt=sample.obstacle_gt,
                 meta=np.array([sample.step_index, sample.iteration, int(holdout)]),
                 scene_id=np.array(sample.scene_id))
        return buffer.getvalue()

    @staticmethod
    def _decode(blob: bytes) -> Tuple[TrainingSample, bool]:
        with np.load(io.BytesIO(blob), allow_pickle=False) as data:
            center = data['center']
            meta = data['meta']
            sample = TrainingSample(
                slices=data['slices'], trajectory=data['trajectory'],
                center=Pose((int(center[0]), int(center[1])), int(center[2])),
                label_index=data['label_index'], label_value=data['label_value'],
                obstacle_gt=data['obstacle_gt'],
                step_index=int(meta[0]), iteration=int(meta[1]),
                scene_id=str(data['scene_id']))
        return sample, bool(meta[2])

    @staticmethod
    def _write_records(f: BinaryIO, samples: Sequence[TrainingSample], holdout: bool):
        for sample in samples:
            blob = ReplayMemory._encode(sample, holdout)
            f.write(struct.pack('<I', len(blob)))
            f.write(blob)

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(MEMORY_MAGIC + struct.pack('<H', MEMORY_VERSION))
            self._write_records(f, self.holdout, True)
            self._write_records(f, self.samples, False)

    @staticmethod
    def append_file(path: Path, samples: Sequence[TrainingSample]):
        """Дописывает записи в файл памяти (создает заголовок для нового файла)"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        with open(path, 'ab') as f:
            if fresh:
                f.write(MEMORY_MAGIC + struct.pack('<H', MEMORY_VERSION))
            ReplayMemory._write_records(f, samples, False)

    @classmethod
    def load(cls, path: Path) -> "ReplayMemory":
        memory = cls()
        with open(path, 'rb') as f:
            header = f.read(len(MEMORY_MAGIC) + 2)
            if header[:len(MEMORY_MAGIC)] != MEMORY_MAGIC:
                raise CheckpointError(f"{path}: не файл памяти воспроизведения")
            version, = struct.unpack('<H', header[len(MEMORY_MAGIC):])
            if version != MEMORY_VERSION:
                raise CheckpointError(f"{path}: неподдерживаемая версия памяти {version}")
            while True:
                prefix = f.read(4)
                if not prefix:
                    break
                if len(prefix) < 4:
                    raise CheckpointError(f"{path}: обрезанная запись")
                length, = struct.unpack('<I', prefix)
                blob = f.read(length)
                if len(blob) < length:
                    raise CheckpointError(f"{path}: обрезанная запись")
                sample, holdout = cls._decode(blob)
                (memory.holdout if holdout else memory.samples).append(sample)
        return memory


def memory_update_and_batch(mem: ReplayMemory, new: Sequence[TrainingSample], iteration: int,
                            curriculum_cutoff: int, rng: np.random.Generator,
                            min_step: int = 10, use_replay: bool = True) -> List[TrainingSample]:
    """Куррикулум для первых итераций, добавление в память и баланс с выборкой старых примеров"""
    survivors = list(new)
    if iteration <= curriculum_cutoff:
        survivors = [s for s in survivors if s.step_index >= min_step]
    older = mem.sample_older(len(survivors), rng) if use_replay else []
    mem.add(survivors, iteration)
    return survivors + older
