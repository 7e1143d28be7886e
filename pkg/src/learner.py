"""
Предиктор NBP: сверточная сеть кодировщик-декодер E -> (M̂, Ô) на numpy,
многозадачная функция потерь с обучаемыми весами неопределенности,
цикл обучения с памятью воспроизведения и оракульный предиктор.
"""
import json
import struct
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from errors import CheckpointError, ShapeMismatchError, TrainingDivergedError
from geometry import N_YAWS, Pose, WindowSpec, heading_yaw
from labels import (ReplayMemory, RolloutContext, TrainingSample, memory_update_and_batch,
                    rollout_collect)
from logger import get_logger
from planning import AgentState, ObstacleMap, ValueMap, dijkstra_tree, random_start_pose
from progress import ExplorationEmbedding, build_embedding
from sensor import SurfelCloud, backproject_from, interpolated_views, render_depth_from
from worldgen import Scene, obstacle_slice

CHECKPOINT_MAGIC = b"NBPCKPT\x00"
CHECKPOINT_VERSION = 1
PROB_CLIP = 1e-6
HEADS = ('value', 'obstacle')


@dataclass(frozen=True, eq=False)
class Prediction:
    value_map: ValueMap
    obstacle_map: ObstacleMap


# --- слои ---

def im2col(x: np.ndarray, stride: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Окна 3×3 с отступом 1: (B, C, H, W) -> (B·Ho·Wo, C·9)"""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)
    return cols, (ho, wo)


def col2im(dcols: np.ndarray, x_shape: Tuple[int, ...], out_hw: Tuple[int, int], stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = out_hw
    d = dcols.reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                d[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    cols, (ho, wo) = im2col(x, stride)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T + b
    out = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, (ho, wo), stride)


def conv_backward(dout: np.ndarray, w: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    cols, x_shape, out_hw, stride = cache
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dx = col2im(dflat @ w.reshape(w.shape[0], -1), x_shape, out_hw, stride)
    return dx, dw, db


def upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(d: np.ndarray) -> np.ndarray:
    b, c, h, w = d.shape
    return d.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --- модель ---

class NBPModel:
    """Кодировщик из трех сверточных блоков stride 2 и две головы с пропусками.

    Голова ценности выдает N_c линейных каналов, голова препятствий: один логит.
    Активация узкого места (c3 × G/8 × G/8): вектор e_{c_t}.
    """

    def __init__(self, in_channels: int, grid: int, channels: Sequence[int] = (16, 32, 64),
                 n_yaws: int = N_YAWS, seed: int = 0, gain_scale: float = 1.0,
                 density_scale: float = 8.0):
        if grid % 8:
            raise ShapeMismatchError(f"сетка окна {grid} должна делиться на 8")
        if len(channels) != 3:
            raise ShapeMismatchError("ожидается ровно три ширины каналов")
        self.in_channels = in_channels
        self.grid = grid
        self.channels = tuple(int(c) for c in channels)
        self.n_yaws = n_yaws
        self.gain_scale = gain_scale
        self.density_scale = density_scale
        self.params: Dict[str, np.ndarray] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator):
        c1, c2, c3 = self.channels

        def conv(name: str, cin: int, cout: int, zero: bool = False):
            std = 1.0 / np.sqrt(cin * 9)
            self.params[f"{name}.w"] = (np.zeros((cout, cin, 3, 3)) if zero
                                        else rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            self.params[f"{name}.b"] = np.zeros(cout)

        conv('enc1', self.in_channels, c1)
        conv('enc2', c1, c2)
        conv('enc3', c2, c3)
        for head, n_out in (('value', self.n_yaws), ('obstacle', 1)):
            conv(f'{head}.dec1', c3 + c2, c2)
            conv(f'{head}.dec2', c2 + c1, c1)
            conv(f'{head}.out', c1, n_out, zero=True)
        self.params['log_sigma1'] = np.zeros(())
        self.params['log_sigma2'] = np.zeros(())

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def check_input(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.grid, self.grid):
            raise ShapeMismatchError(
                f"вход {x.shape[1:]} не совпадает с моделью {(self.in_channels, self.grid, self.grid)}")

    def forward(self, x: np.ndarray):
        """(B, K+1, G, G) -> значения (B, N_c, G, G), логиты препятствий (B, 1, G, G), кэш"""
        self.check_input(x)
        p = self.params
        cache = {}
        h = x
        acts = []
        for name in ('enc1', 'enc2', 'enc3'):
            z, cache[name] = conv_forward(h, p[f'{name}.w'], p[f'{name}.b'], 2)
            h = np.tanh(z)
            acts.append(h)
        a1, a2, a3 = acts
        cache['acts'] = acts

        outputs = {}
        for head in HEADS:
            cat1 = np.concatenate([upsample(a3), a2], axis=1)
            z1, cache[f'{head}.dec1'] = conv_forward(cat1, p[f'{head}.dec1.w'], p[f'{head}.dec1.b'], 1)
            d1 = np.tanh(z1)
            cat2 = np.concatenate([upsample(d1), a1], axis=1)
            z2, cache[f'{head}.dec2'] = conv_forward(cat2, p[f'{head}.dec2.w'], p[f'{head}.dec2.b'], 1)
            d2 = np.tanh(z2)
            out, cache[f'{head}.out'] = conv_forward(upsample(d2), p[f'{head}.out.w'], p[f'{head}.out.b'], 1)
            cache[f'{head}.d'] = (d1, d2)
            outputs[head] = out
        return outputs['value'], outputs['obstacle'], cache

    def backward(self, cache, dvalue: np.ndarray, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        p = self.params
        grads = {name: np.zeros_like(v) for name, v in p.items()}
        a1, a2, a3 = cache['acts']
        c1, c2, c3 = self.channels
        da1, da2, da3 = np.zeros_like(a1), np.zeros_like(a2), np.zeros_like(a3)

        for head, dout in (('value', dvalue), ('obstacle', dlogits)):
            d1, d2 = cache[f'{head}.d']
            dup3, grads[f'{head}.out.w'], grads[f'{head}.out.b'] = \
                conv_backward(dout, p[f'{head}.out.w'], cache[f'{head}.out'])
            dz2 = upsample_backward(dup3) * (1.0 - d2 ** 2)
            dcat2, grads[f'{head}.dec2.w'], grads[f'{head}.dec2.b'] = \
                conv_backward(dz2, p[f'{head}.dec2.w'], cache[f'{head}.dec2'])
            da1 += dcat2[:, c2:]
            dz1 = upsample_backward(dcat2[:, :c2]) * (1.0 - d1 ** 2)
            dcat1, grads[f'{head}.dec1.w'], grads[f'{head}.dec1.b'] = \
                conv_backward(dz1, p[f'{head}.dec1.w'], cache[f'{head}.dec1'])
            da2 += dcat1[:, c3:]
            da3 += upsample_backward(dcat1[:, :c3])

        dz = da3 * (1.0 - a3 ** 2)
        dh, grads['enc3.w'], grads['enc3.b'] = conv_backward(dz, p['enc3.w'], cache['enc3'])
        dz = (da2 + dh) * (1.0 - a2 ** 2)
        dh, grads['enc2.w'], grads['enc2.b'] = conv_backward(dz, p['enc2.w'], cache['enc2'])
        dz = (da1 + dh) * (1.0 - a1 ** 2)
        _, grads['enc1.w'], grads['enc1.b'] = conv_backward(dz, p['enc1.w'], cache['enc1'])
        return grads

    def embedding_input(self, embedding: ExplorationEmbedding) -> np.ndarray:
        x = embedding.as_input(self.density_scale)
        if x.shape != (self.in_channels, self.grid, self.grid):
            raise ShapeMismatchError(f"вложение {x.shape} не совпадает с окном модели")
        return x.astype(np.float64)

    def predict_arrays(self, embedding: ExplorationEmbedding) -> Tuple[np.ndarray, np.ndarray]:
        """Карта ценности (G, G, N_c) и вероятности препятствий (G, G)"""
        value, logits, _ = self.forward(self.embedding_input(embedding)[None])
        return value[0].transpose(1, 2, 0), sigmoid(logits[0, 0])

    def loss_and_grads(self, samples: Sequence[TrainingSample], task_mode: str = 'multi',
                       learn_sigmas: bool = True) -> Tuple[float, Dict[str, np.ndarray], Dict[str, float]]:
        """L = (1/2σ1²)·MSE_masked + (1/σ2²)·BCE + log σ1 + log σ2 по батчу"""
        x = np.stack([self.embedding_input(s.embedding) for s in samples])
        shape = (self.grid, self.grid, self.n_yaws)
        targets, masks = zip(*(s.value_targets(shape) for s in samples))
        target = np.stack(targets).transpose(0, 3, 1, 2) / self.gain_scale
        mask = np.stack(masks).transpose(0, 3, 1, 2)
        occupancy = np.stack([s.obstacle_gt for s in samples]).astype(np.float64)[:, None]

        value, logits, cache = self.forward(x)
        s1 = float(self.params['log_sigma1'])
        s2 = float(self.params['log_sigma2'])
        w1, w2 = np.exp(-2.0 * s1), np.exp(-2.0 * s2)

        n_labels = int(mask.sum())
        residual = np.where(mask, value - target, 0.0)
        mse = float(np.sum(residual ** 2) / n_labels) if n_labels else 0.0

        prob = sigmoid(logits)
        clipped = np.clip(prob, PROB_CLIP, 1.0 - PROB_CLIP)
        bce = float(-np.mean(occupancy * np.log(clipped) + (1.0 - occupancy) * np.log(1.0 - clipped)))

        use_value = task_mode in ('multi', 'value_only')
        use_obstacle = task_mode in ('multi', 'obstacle_only')
        loss = 0.0
        dvalue = np.zeros_like(value)
        dlogits = np.zeros_like(logits)
        grad_s1 = grad_s2 = 0.0
        if use_value:
            loss += 0.5 * w1 * mse + s1
            if n_labels:
                dvalue = w1 * residual / n_labels
            grad_s1 = 1.0 - w1 * mse
        if use_obstacle:
            loss += w2 * bce + s2
            inside = (prob > PROB_CLIP) & (prob < 1.0 - PROB_CLIP)
            dlogits = w2 * np.where(inside, prob - occupancy, 0.0) / occupancy.size
            grad_s2 = 1.0 - 2.0 * w2 * bce

        if not np.isfinite(loss):
            raise TrainingDivergedError(f"функция потерь не конечна: {loss}")
        grads = self.backward(cache, dvalue, dlogits)
        grads['log_sigma1'] = np.array(grad_s1 if learn_sigmas else 0.0)
        grads['log_sigma2'] = np.array(grad_s2 if learn_sigmas else 0.0)
        return float(loss), grads, {'mse': mse, 'bce': bce, 'labels': n_labels}

    def sigmas(self) -> Tuple[float, float]:
        return float(np.exp(self.params['log_sigma1'])), float(np.exp(self.params['log_sigma2']))


def predict(model: NBPModel, embedding: ExplorationEmbedding, window: WindowSpec,
            threshold: float = 0.5) -> Prediction:
    values, probs = model.predict_arrays(embedding)
    return Prediction(ValueMap(values, window, embedding.center),
                      ObstacleMap(probs, window, embedding.center, threshold))


def loss(model: NBPModel, sample: TrainingSample, task_mode: str = 'multi',
         learn_sigmas: bool = True) -> Tuple[float, Dict[str, np.ndarray]]:
    value, grads, _ = model.loss_and_grads([sample], task_mode, learn_sigmas)
    return value, grads


class LearnedPredictor:
    def __init__(self, model: NBPModel, window: WindowSpec, threshold: float = 0.5):
        self.model = model
        self.window = window
        self.threshold = threshold

    def __call__(self, state: AgentState) -> Prediction:
        embedding = build_embedding(state.cloud, state.history, state.pose, self.window)
        return predict(self.model, embedding, self.window, self.threshold)


# --- оракул ---

class ViewCache:
    """Точки каждой позы сцены без шума, по одной на воксель облака"""

    def __init__(self, max_views: int = 8192):
        self.max_views = max_views
        self._views: "OrderedDict[Tuple[str, Pose], np.ndarray]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._views)

    @staticmethod
    def _render(state: AgentState, origin: np.ndarray, yaw: float) -> np.ndarray:
        depth = render_depth_from(state.scene, origin, yaw, state.cam)
        points = backproject_from(depth, origin, yaw, state.cam)
        return SurfelCloud(state.cloud.voxel_size).insert(points)

    def get(self, state: AgentState, pose: Pose) -> np.ndarray:
        key = (state.scene.scene_id, pose)
        if key in self._views:
            self._views.move_to_end(key)
            return self._views[key]
        scene = state.scene
        points = self._render(state, pose.position(scene.cell_size, scene.agent_height), pose.yaw)
        self._views[key] = points
        if len(self._views) > self.max_views:
            self._views.popitem(last=False)
        return points

    def transition(self, state: AgentState, previous: Pose, pose: Pose) -> np.ndarray:
        """Все точки шага previous -> pose в порядке вставки, как в AgentState.observe"""
        if state.interp_frames == 0:
            return self.get(state, pose)
        parts = [self._render(state, origin, yaw)
                 for origin, yaw in interpolated_views(state.scene, previous, pose, state.interp_frames)]
        parts.append(self.get(state, pose))
        return np.concatenate(parts, axis=0)


def _nearest_fill(values: np.ndarray, computed: np.ndarray, reachable: np.ndarray, stride: int):
    grid = values.shape[0]
    offsets = sorted(((du, dv) for du in range(-stride, stride + 1) for dv in range(-stride, stride + 1)),
                     key=lambda o: (o[0] ** 2 + o[1] ** 2, o))
    for u, v in np.argwhere(reachable & ~computed):
        for du, dv in offsets:
            nu, nv = u + du, v + dv
            if 0 <= nu < grid and 0 <= nv < grid and computed[nu, nv]:
                values[u, v] = values[nu, nv]
                break


def oracle_predict(scene: Scene, state: AgentState, window: WindowSpec, stride: int = 1,
                   cache: Optional[ViewCache] = None, threshold: float = 0.5) -> Prediction:
    """Точная карта препятствий и ΔCov исполнения пути до каждой позы окна.

    Путь идет по дереву кратчайших путей, промежуточные позы смотрят по направлению
    движения, последняя: в рыскании канала. Облако и покрытие копии состояния меняются
    вдоль обхода в глубину и откатываются на выходе из поддерева. Рендер без шума.
    Недостижимые клетки получают 0.
    """
    cache = cache if cache is not None else ViewCache()
    grid = obstacle_slice(scene, state.pose, window)
    center = (window.half, window.half)
    _, previous = dijkstra_tree(grid, center)
    children: Dict[Tuple[int, int], List[Tuple[int, int]]] = defaultdict(list)
    for node, parent in previous.items():
        if parent is not None:
            children[parent].append(node)

    cloud = state.cloud.copy()
    tracker = state.tracker.copy()
    base = tracker.count
    total = tracker.total
    values = np.zeros((window.grid, window.grid, N_YAWS))
    computed = np.zeros((window.grid, window.grid), dtype=bool)
    reachable = np.zeros_like(computed)

    def arrival(node: Tuple[int, int]) -> Pose:
        if node == center:
            return state.pose
        return Pose(window.window_to_cell(*node, state.pose), heading_yaw(previous[node], node))

    stack: List[tuple] = [('enter', center, None)]
    while stack:
        event, node, payload = stack.pop()
        if event == 'exit':
            count, fresh = payload
            cloud.truncate(count)
            tracker.unmark(fresh)
            continue
        u, v = node
        reachable[u, v] = True
        cell = window.window_to_cell(u, v, state.pose)
        before = state.pose if node == center else arrival(previous[node])
        if (u - center[0]) % stride == 0 and (v - center[1]) % stride == 0:
            walked = tracker.count - base
            for yaw in range(N_YAWS):
                pose = Pose(cell, yaw)
                if pose == state.pose:
                    continue
                gain = tracker.peek_gain(cloud.novel(cache.transition(state, before, pose)))
                values[u, v, yaw] = (walked + gain) / total
            computed[u, v] = True
        kids = sorted(children.get(node, []))
        if not kids:
            continue
        if node != center:
            count = len(cloud)
            added = cloud.insert(cache.transition(state, before, arrival(node)))
            stack.append(('exit', node, (count, tracker.mark(added))))
        for kid in reversed(kids):
            stack.append(('enter', kid, None))

    if stride > 1:
        _nearest_fill(values, computed, reachable, stride)
    return Prediction(ValueMap(values, window, state.pose),
                      ObstacleMap.from_grid(grid, window, state.pose, threshold))


class OraclePredictor:
    def __init__(self, window: WindowSpec, stride: int = 2, threshold: float = 0.5):
        self.window = window
        self.stride = stride
        self.threshold = threshold
        self.cache = ViewCache()

    def __call__(self, state: AgentState) -> Prediction:
        return oracle_predict(state.scene, state, self.window, self.stride, self.cache, self.threshold)


# --- оптимизация и обучение ---

class MomentumSGD:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(v) for name, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g
            params[name] += v


@dataclass
class TrainResult:
    model: NBPModel
    log: List[dict] = field(default_factory=list)
    memory: Optional[ReplayMemory] = None


def evaluate_loss(model: NBPModel, samples: Sequence[TrainingSample], batch_size: int,
                  task_mode: str = 'multi') -> float:
    """Средняя по примерам функция потерь (градиенты не используются)"""
    if not samples:
        return float('nan')
    total = 0.0
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        value, _, _ = model.loss_and_grads(batch, task_mode)
        total += value * len(batch)
    return total / len(samples)


def fit(model: NBPModel, train_set: Sequence[TrainingSample], holdout: Sequence[TrainingSample],
        settings, rng: np.random.Generator, iteration: int, log: List[dict],
        log_path: Optional[Path] = None, progress: bool = True):
    """До E эпох SGD с накоплением градиента; понижение lr и остановка на плато holdout"""
    logger = get_logger()
    optimizer = MomentumSGD(model.params, settings.learning_rate, settings.momentum)
    reference = holdout if holdout else train_set
    best = evaluate_loss(model, reference, settings.batch_size, settings.task_mode)
    stalled, decayed = 0, False
    epochs = range(settings.epochs)
    if progress:
        epochs = tqdm(epochs, desc=f"Итерация {iteration}", unit="эпоха")

    for epoch in epochs:
        order = rng.permutation(len(train_set))
        accumulated: Dict[str, np.ndarray] = {}
        pending = 0
        running = 0.0
        batches = range(0, len(order), settings.batch_size)
        for k, start in enumerate(batches):
            batch = [train_set[int(i)] for i in order[start:start + settings.batch_size]]
            value, grads, _ = model.loss_and_grads(batch, settings.task_mode, settings.learn_sigmas)
            running += value * len(batch)
            for name, g in grads.items():
                accumulated[name] = accumulated.get(name, 0.0) + g
            pending += 1
            if pending == settings.accumulation_steps or k == len(batches) - 1:
                optimizer.step(model.params, {n: g / pending for n, g in accumulated.items()})
                accumulated, pending = {}, 0

        held = evaluate_loss(model, reference, settings.batch_size, settings.task_mode)
        if not np.isfinite(held):
            raise TrainingDivergedError(f"потери holdout не конечны на эпохе {epoch + 1}", iteration)
        sigma1, sigma2 = model.sigmas()
        record = {
            'iteration': iteration, 'epoch': epoch + 1,
            'train_loss': running / max(len(train_set), 1), 'holdout_loss': held,
            'sigma1': sigma1, 'sigma2': sigma2, 'lr': optimizer.lr, 'samples': len(train_set),
        }
        log.append(record)
        if log_path is not None:
            with open(log_path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
        logger.debug(f"📊 итерация {iteration} эпоха {epoch + 1}: holdout={held:.5f} σ1={sigma1:.3f} σ2={sigma2:.3f}")

        if held < best:
            best, stalled = held, 0
            continue
        stalled += 1
        if stalled >= settings.plateau_patience:
            if decayed:
                logger.info(f"⏹️  Плато holdout на эпохе {epoch + 1}, остановка итерации {iteration}")
                break
            optimizer.lr *= settings.lr_decay
            decayed, stalled = True, 0
            logger.info(f"📉 Плато holdout: lr -> {optimizer.lr:g}")


def train(scenes: Sequence[Scene], config, model: Optional[NBPModel] = None,
          memory: Optional[ReplayMemory] = None,
          batch_recorder: Optional[Callable[[int, List[TrainingSample]], None]] = None,
          progress: bool = True) -> TrainResult:
    """Внешний цикл: сбор роллаутов, куррикулум и память, затем эпохи SGD"""
    if not scenes:
        raise ValueError("для обучения нужна хотя бы одна сцена")
    logger = get_logger()
    t = config.training
    window = config.window_spec()
    rng = np.random.default_rng(t.seed)
    if model is None:
        model = NBPModel(window.slices + 1, window.grid, config.model.channels,
                         seed=config.model.init_seed, density_scale=config.window.density_scale)
        model.gain_scale = 0.0
    memory = memory if memory is not None else ReplayMemory()
    ctx = RolloutContext(window=window, cam=config.camera_model(), cov_cfg=config.coverage_config(),
                         noise_std=config.sensor.depth_noise_std, interp_frames=config.sensor.interp_frames,
                         goal_retries=config.planner.goal_retries,
                         obstacle_threshold=config.planner.obstacle_threshold)
    log_path = Path(t.log_path) if t.log_path else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)

    logger.start_session("Обучение NBP", сцены=len(scenes), итерации=t.iterations,
                         параметры=model.parameter_count, режим=t.task_mode)
    result = TrainResult(model=model, memory=memory)
    for iteration in range(1, t.iterations + 1):
        count = t.trajectories_first if iteration == 1 else t.trajectories_rest
        predictor = LearnedPredictor(model, window, config.planner.obstacle_threshold)
        jobs = [(scene, k) for scene in scenes for k in range(count)]
        bar = tqdm(jobs, desc=f"Сбор данных {iteration}", unit="роллаут") if progress else jobs
        new: List[TrainingSample] = []
        for scene, _ in bar:
            start = random_start_pose(scene, rng)
            new.extend(rollout_collect(scene, predictor, start, t.rollout_length,
                                       config.planner.beta, rng, ctx, iteration))

        if not model.gain_scale:
            model.gain_scale = _initial_gain_scale(t.gain_scale, new + memory.samples)
            logger.info(f"📏 Масштаб выигрыша: {model.gain_scale:.5f}")

        new = memory.draw_holdout(new, t.holdout_size, rng)
        train_set = memory_update_and_batch(memory, new, iteration, t.easy_iterations, rng,
                                            t.curriculum_min_step, t.use_replay)
        if batch_recorder is not None:
            batch_recorder(iteration, train_set)
        logger.info(f"📦 Итерация {iteration}: новых {len(new)}, в батче {len(train_set)}, "
                    f"память {len(memory)}, holdout {len(memory.holdout)}")
        if not train_set:
            logger.warning(f"⚠️  Итерация {iteration}: нет примеров для обучения")
            continue
        try:
            fit(model, train_set, memory.holdout, t, rng, iteration, result.log, log_path, progress)
        except TrainingDivergedError as e:
            e.iteration = iteration
            logger.error(f"❌ Обучение разошлось на итерации {iteration}: {e}")
            raise

    sigma1, sigma2 = model.sigmas()
    logger.end_session("Обучение NBP", σ1=f"{sigma1:.4f}", σ2=f"{sigma2:.4f}",
                       записей_лога=len(result.log))
    return result


def _initial_gain_scale(configured: Optional[float], samples: Sequence[TrainingSample]) -> float:
    if configured:
        return float(configured)
    peak = max((float(s.label_value.max()) for s in samples if s.n_labels), default=0.0)
    return peak if peak > 0 else 1.0


# --- чекпоинт ---

def save_checkpoint(model: NBPModel, path: Path):
    """Магия, версия, JSON-метаданные, затем именованные тензоры float64 little-endian"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({
        'in_channels': model.in_channels, 'grid': model.grid, 'channels': list(model.channels),
        'n_yaws': model.n_yaws, 'gain_scale': model.gain_scale, 'density_scale': model.density_scale,
    }).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack('<I', len(model.params)))
        for name, tensor in model.params.items():
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<B', tensor.ndim))
            f.write(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype='<f8').tobytes())


def load_checkpoint(path: Path) -> NBPModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"чекпоинт не найден: {path}")
    try:
        with open(path, 'rb') as f:
            if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: не чекпоинт модели")
            version, meta_len = struct.unpack('<II', f.read(8))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: неподдерживаемая версия {version}")
            meta = json.loads(f.read(meta_len).decode('utf-8'))
            model = NBPModel(meta['in_channels'], meta['grid'], meta['channels'], meta['n_yaws'],
                             gain_scale=meta['gain_scale'], density_scale=meta['density_scale'])
            count, = struct.unpack('<I', f.read(4))
            for _ in range(count):
                name_len, = struct.unpack('<H', f.read(2))
                name = f.read(name_len).decode('utf-8')
                ndim, = struct.unpack('<B', f.read(1))
                shape = struct.unpack(f'<{ndim}I', f.read(4 * ndim))
                size = int(np.prod(shape)) if ndim else 1
                data = np.frombuffer(f.read(8 * size), dtype='<f8')
                if name not in model.params or model.params[name].shape != shape or data.size != size:
                    raise CheckpointError(f"{path}: тензор '{name}' {shape} не подходит модели")
                model.params[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise CheckpointError(f"{path}: поврежденный чекпоинт ({e})")
    return model
