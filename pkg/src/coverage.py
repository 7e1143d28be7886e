"""
Точные метрики покрытия поверхности: Cov, ΔCov, AUC, Comp% и Comp-cm.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from errors import CoverageError
from sensor import SurfelCloud

_KEY_OFFSET = 1 << 20
_KEY_BITS = 21


@dataclass(frozen=True)
class CoverageConfig:
    epsilon: float = 0.5
    comp_threshold: float = 0.25
    comp_cap: float = 2.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon должен быть > 0")


def _encode(keys: np.ndarray) -> np.ndarray:
    shifted = keys.astype(np.int64) + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


class GroundTruthIndex:
    """Воксельный хеш точек GT в виде отсортированных кодов и таблицы индексов"""

    def __init__(self, points: np.ndarray, voxel_size: float):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.voxel_size = voxel_size
        codes = _encode(np.floor(self.points / voxel_size))
        order = np.argsort(codes, kind='stable')
        self.codes, start, counts = np.unique(codes[order], return_index=True, return_counts=True)
        width = int(counts.max()) if len(counts) else 1
        self.table = np.full((len(self.codes), width), -1, dtype=np.int64)
        group = np.repeat(np.arange(len(self.codes)), counts)
        rank = np.arange(len(order)) - start[group]
        self.table[group, rank] = order

    def near(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Индексы точек GT, у которых есть точка query на расстоянии строго < radius"""
        query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        if len(query) == 0 or len(self.codes) == 0:
            return np.zeros(0, dtype=np.int64)
        reach = int(math.ceil(radius / self.voxel_size))
        base = np.floor(query / self.voxel_size).astype(np.int64)
        found = []
        rng = range(-reach, reach + 1)
        for di in rng:
            for dk in rng:
                for dj in rng:
                    codes = _encode(base + np.array([di, dk, dj]))
                    pos = np.minimum(np.searchsorted(self.codes, codes), len(self.codes) - 1)
                    hit = self.codes[pos] == codes
                    if not hit.any():
                        continue
                    cand = self.table[pos[hit]]
                    diff = self.points[np.maximum(cand, 0)] - query[hit][:, None, :]
                    close = (cand >= 0) & (np.linalg.norm(diff, axis=-1) < radius)
                    found.append(cand[close])
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(found))


def covered_mask(gt: np.ndarray, cloud: SurfelCloud, cfg: CoverageConfig) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise CoverageError("пустой набор точек GT")
    mask = np.zeros(len(gt), dtype=bool)
    mask[GroundTruthIndex(gt, cfg.epsilon).near(cloud.points, cfg.epsilon)] = True
    return mask


def covered_count(gt: np.ndarray, cloud: SurfelCloud, cfg: CoverageConfig) -> int:
    return int(covered_mask(gt, cloud, cfg).sum())


def coverage(gt: np.ndarray, cloud: SurfelCloud, cfg: CoverageConfig) -> float:
    """(1/N_GT) Σ 1(min_y |x_i - y| < ε)"""
    mask = covered_mask(gt, cloud, cfg)
    return float(mask.sum()) / len(mask)


def coverage_gain(gt: np.ndarray, cloud_t: SurfelCloud, cloud_g: SurfelCloud, cfg: CoverageConfig) -> float:
    """ΔCov_{t->g}; требуется P_g ⊇ P_t"""
    missing = [key for key in cloud_t.keys() if key not in cloud_g]
    if missing:
        raise CoverageError(f"облако P_g не содержит {len(missing)} вокселей P_t")
    before = covered_count(gt, cloud_t, cfg)
    after = covered_count(gt, cloud_g, cfg)
    return (after - before) / len(gt)


def auc(series: Sequence[float], horizon: int) -> float:
    """(1/T) Σ_{t=1..T} Cov_t; недостающий хвост дополняется последним значением"""
    if len(series) == 0:
        raise CoverageError("пустой ряд покрытия")
    if horizon < len(series):
        raise CoverageError(f"длина ряда {len(series)} больше горизонта {horizon}")
    values = list(series) + [series[-1]] * (horizon - len(series))
    return float(math.fsum(values) / horizon)


def completeness(gt: np.ndarray, cloud: SurfelCloud, cfg: CoverageConfig) -> Tuple[float, float]:
    """(доля GT ближе comp_threshold, среднее минимальное расстояние с потолком comp_cap)"""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise CoverageError("пустой набор точек GT")
    dist = np.array([cloud.nearest_distance(p, cfg.comp_cap) for p in gt])
    return float(np.mean(dist < cfg.comp_threshold)), float(np.mean(dist))


class CoverageTracker:
    """Инкрементальное покрытие: хранит маску покрытых точек GT.

    Подавать нужно только точки, реально добавленные в облако (SurfelCloud.insert),
    тогда count совпадает с covered_count(gt, cloud).
    """

    def __init__(self, gt: np.ndarray, cfg: CoverageConfig):
        self.gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
        if len(self.gt) == 0:
            raise CoverageError("пустой набор точек GT")
        self.cfg = cfg
        self.index = GroundTruthIndex(self.gt, cfg.epsilon)
        self.covered = np.zeros(len(self.gt), dtype=bool)
        self.count = 0

    @property
    def total(self) -> int:
        return len(self.gt)

    @property
    def value(self) -> float:
        return self.count / self.total

    def visible(self, points: np.ndarray) -> np.ndarray:
        return self.index.near(points, self.cfg.epsilon)

    def peek_gain(self, points: np.ndarray) -> int:
        """Число новых покрытых точек без изменения состояния"""
        idx = self.visible(points)
        return int((~self.covered[idx]).sum())

    def mark(self, points: np.ndarray) -> np.ndarray:
        """Отмечает покрытые точки GT; возвращает индексы впервые покрытых"""
        idx = self.visible(points)
        fresh = idx[~self.covered[idx]]
        self.covered[fresh] = True
        self.count += len(fresh)
        return fresh

    def unmark(self, fresh: np.ndarray):
        self.covered[fresh] = False
        self.count -= len(fresh)

    def update(self, points: np.ndarray) -> int:
        return len(self.mark(points))

    def copy(self) -> "CoverageTracker":
        other = CoverageTracker.__new__(CoverageTracker)
        other.gt = self.gt
        other.cfg = self.cfg
        other.index = self.index
        other.covered = self.covered.copy()
        other.count = self.count
        return other
