"""
Тесты предиктора NBP: слои, градиенты, функция потерь, оракул, обучение и чекпоинт
"""
import json
import math
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from config import Config, TrainingSettings
from coverage import CoverageTracker, covered_count
from errors import CheckpointError, ShapeMismatchError
from geometry import N_YAWS, Pose, WindowSpec, heading_yaw
from labels import ReplayMemory, TrainingSample
from learner import (HEADS, LearnedPredictor, MomentumSGD, NBPModel, OraclePredictor, ViewCache,
                     conv_backward, conv_forward, evaluate_loss, fit, load_checkpoint, oracle_predict,
                     predict, save_checkpoint, sigmoid, train, upsample, upsample_backward)
from planning import AgentState, HaltReason, dijkstra_tree, execute_path, reconstruct
from progress import ExplorationEmbedding
from scene_factory import coverage_cfg, room_scene, small_camera, small_window, write_tiny_config
from worldgen import obstacle_slice

TINY_WINDOW = WindowSpec(extent=4.0, grid=8, slices=2)


def naive_conv(x, w, b, stride):
    """Свертка 3×3 с отступом 1 в лоб"""
    batch, _, h, width = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (h - 1) // stride + 1, (width - 1) // stride + 1
    out = np.zeros((batch, w.shape[0], ho, wo))
    for n in range(batch):
        for co in range(w.shape[0]):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    out[n, co, i, j] = np.sum(patch * w[co]) + b[co]
    return out


def naive_forward(model, x):
    p = model.params
    up = lambda a: a.repeat(2, axis=2).repeat(2, axis=3)
    a1 = np.tanh(naive_conv(x, p['enc1.w'], p['enc1.b'], 2))
    a2 = np.tanh(naive_conv(a1, p['enc2.w'], p['enc2.b'], 2))
    a3 = np.tanh(naive_conv(a2, p['enc3.w'], p['enc3.b'], 2))
    out = {}
    for head in HEADS:
        d1 = np.tanh(naive_conv(np.concatenate([up(a3), a2], axis=1), p[f'{head}.dec1.w'], p[f'{head}.dec1.b'], 1))
        d2 = np.tanh(naive_conv(np.concatenate([up(d1), a1], axis=1), p[f'{head}.dec2.w'], p[f'{head}.dec2.b'], 1))
        out[head] = naive_conv(up(d2), p[f'{head}.out.w'], p[f'{head}.out.b'], 1)
    return out['value'], out['obstacle']


def randomize(model, seed=0, scale=0.4):
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        if value.ndim:
            model.params[name] = rng.normal(0.0, scale, size=value.shape)
    model.params['log_sigma1'] = np.array(0.3)
    model.params['log_sigma2'] = np.array(-0.2)
    return model


def make_sample(seed, n_labels=12, grid=8, slices=2):
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(grid * grid * N_YAWS, size=n_labels, replace=False)).astype(np.int64)
    return TrainingSample(
        slices=rng.integers(0, 6, size=(slices, grid, grid)).astype(np.float32),
        trajectory=rng.integers(0, 3, size=(grid, grid)).astype(np.float32),
        center=Pose((5, 5), 0),
        label_index=index,
        label_value=rng.uniform(0.0, 0.1, size=n_labels),
        obstacle_gt=rng.random((grid, grid)) < 0.4,
        step_index=int(rng.integers(0, 30)),
    )


def tiny_model(seed=0):
    return NBPModel(TINY_WINDOW.slices + 1, TINY_WINDOW.grid, (2, 3, 4), seed=seed)


class TestLayers(unittest.TestCase):
    """Тесты сверток и повышающей дискретизации"""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_conv_matches_naive(self):
        x = self.rng.normal(size=(2, 3, 8, 8))
        w = self.rng.normal(size=(4, 3, 3, 3))
        b = self.rng.normal(size=4)
        for stride in (1, 2):
            out, _ = conv_forward(x, w, b, stride)
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride), atol=1e-12)

    def test_conv_backward_numeric(self):
        x = self.rng.normal(size=(1, 2, 4, 4))
        w = self.rng.normal(size=(3, 2, 3, 3))
        b = self.rng.normal(size=3)
        for stride in (1, 2):
            out, cache = conv_forward(x, w, b, stride)
            r = self.rng.normal(size=out.shape)
            dx, dw, db = conv_backward(r, w, cache)
            h = 1e-6
            for arr, grad in ((x, dx), (w, dw), (b, db)):
                for flat in self.rng.choice(arr.size, size=5, replace=False):
                    idx = np.unravel_index(int(flat), arr.shape)
                    saved = arr[idx]
                    arr[idx] = saved + h
                    plus = np.sum(conv_forward(x, w, b, stride)[0] * r)
                    arr[idx] = saved - h
                    minus = np.sum(conv_forward(x, w, b, stride)[0] * r)
                    arr[idx] = saved
                    self.assertAlmostEqual(grad[idx], (plus - minus) / (2 * h), delta=1e-6)

    def test_upsample_adjoint(self):
        x = self.rng.normal(size=(2, 3, 4, 4))
        y = self.rng.normal(size=(2, 3, 8, 8))
        self.assertAlmostEqual(np.sum(upsample(x) * y), np.sum(x * upsample_backward(y)))

    def test_sigmoid(self):
        np.testing.assert_allclose(sigmoid(np.array([-3.0, 0.0, 2.0])),
                                   1.0 / (1.0 + np.exp(-np.array([-3.0, 0.0, 2.0]))))


class TestModel(unittest.TestCase):
    """Тесты прямого прохода и формы входа"""

    def test_forward_matches_naive(self):
        model = randomize(tiny_model())
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
        value, logits, _ = model.forward(x)
        ref_value, ref_logits = naive_forward(model, x)
        self.assertEqual(value.shape, (2, N_YAWS, 8, 8))
        self.assertEqual(logits.shape, (2, 1, 8, 8))
        np.testing.assert_allclose(value, ref_value, atol=1e-10)
        np.testing.assert_allclose(logits, ref_logits, atol=1e-10)

    def test_fresh_model_predicts_zero(self):
        """Выходные свертки инициализированы нулями: M̂ = 0, Ô = 0.5"""
        model = tiny_model()
        rng = np.random.default_rng(2)
        embedding = ExplorationEmbedding(rng.random((2, 8, 8)), rng.random((8, 8)), Pose((4, 4), 0))
        prediction = predict(model, embedding, TINY_WINDOW)
        self.assertFalse(prediction.value_map.values.any())
        np.testing.assert_array_equal(prediction.obstacle_map.probs, np.full((8, 8), 0.5))

    def test_shape_mismatch(self):
        model = tiny_model()
        with self.assertRaises(ShapeMismatchError):
            model.forward(np.zeros((1, 3, 16, 16)))
        with self.assertRaises(ShapeMismatchError):
            model.forward(np.zeros((1, 4, 8, 8)))
        with self.assertRaises(ShapeMismatchError):
            NBPModel(3, 12)
        with self.assertRaises(ShapeMismatchError):
            NBPModel(3, 8, (2, 3))
        embedding = ExplorationEmbedding(np.zeros((4, 8, 8)), np.zeros((8, 8)), Pose((4, 4), 0))
        with self.assertRaises(ShapeMismatchError):
            model.predict_arrays(embedding)


class TestLoss(unittest.TestCase):
    """Многозадачная функция потерь и ее градиенты"""

    def setUp(self):
        self.samples = [make_sample(0), make_sample(1)]

    def check_gradients(self, model, task_mode):
        _, grads, _ = model.loss_and_grads(self.samples, task_mode)
        rng = np.random.default_rng(3)
        h = 1e-5
        for name, param in model.params.items():
            count = min(param.size, 4)
            for flat in rng.choice(param.size, size=count, replace=False):
                idx = np.unravel_index(int(flat), param.shape) if param.ndim else ()
                saved = float(param[idx])
                param[idx] = saved + h
                plus = model.loss_and_grads(self.samples, task_mode)[0]
                param[idx] = saved - h
                minus = model.loss_and_grads(self.samples, task_mode)[0]
                param[idx] = saved
                numeric = (plus - minus) / (2 * h)
                self.assertAlmostEqual(float(grads[name][idx]), numeric,
                                       delta=1e-7 + 1e-4 * abs(numeric), msg=f"{task_mode}: {name}{idx}")

    def test_gradients_multi(self):
        self.check_gradients(randomize(tiny_model()), 'multi')

    def test_gradients_single_task(self):
        self.check_gradients(randomize(tiny_model(), seed=5), 'value_only')
        self.check_gradients(randomize(tiny_model(), seed=6), 'obstacle_only')

    def test_unit_sigma_formula(self):
        """При σ1 = σ2 = 1: L = MSE/2 + BCE"""
        model = randomize(tiny_model())
        model.params['log_sigma1'] = np.array(0.0)
        model.params['log_sigma2'] = np.array(0.0)
        value, _, info = model.loss_and_grads(self.samples)
        self.assertAlmostEqual(value, 0.5 * info['mse'] + info['bce'])
        self.assertEqual(info['labels'], 24)

    def test_sigma_stationary_point(self):
        """log σ1 = ½·log MSE и log σ2 = ½·log(2·BCE) обнуляют производные по σ"""
        model = randomize(tiny_model())
        _, _, info = model.loss_and_grads(self.samples)
        model.params['log_sigma1'] = np.array(0.5 * math.log(info['mse']))
        model.params['log_sigma2'] = np.array(0.5 * math.log(2.0 * info['bce']))
        _, grads, _ = model.loss_and_grads(self.samples)
        self.assertAlmostEqual(float(grads['log_sigma1']), 0.0, places=10)
        self.assertAlmostEqual(float(grads['log_sigma2']), 0.0, places=10)

    def test_no_labels(self):
        """Без меток MSE = 0, голова ценности не обучается"""
        model = randomize(tiny_model())
        sample = make_sample(0, n_labels=0)
        _, grads, info = model.loss_and_grads([sample])
        self.assertEqual(info['mse'], 0.0)
        self.assertEqual(float(grads['log_sigma1']), 1.0)
        for part in ('dec1', 'dec2', 'out'):
            self.assertFalse(grads[f'value.{part}.w'].any())

    def test_single_task_modes(self):
        model = randomize(tiny_model())
        s1, s2 = 0.3, -0.2
        value, grads, info = model.loss_and_grads(self.samples, 'value_only')
        self.assertAlmostEqual(value, 0.5 * math.exp(-2 * s1) * info['mse'] + s1)
        self.assertFalse(grads['obstacle.out.w'].any())
        self.assertEqual(float(grads['log_sigma2']), 0.0)
        value, grads, info = model.loss_and_grads(self.samples, 'obstacle_only')
        self.assertAlmostEqual(value, math.exp(-2 * s2) * info['bce'] + s2)
        self.assertFalse(grads['value.out.w'].any())
        self.assertEqual(float(grads['log_sigma1']), 0.0)

    def test_frozen_sigmas(self):
        model = randomize(tiny_model())
        _, grads, _ = model.loss_and_grads(self.samples, learn_sigmas=False)
        self.assertEqual(float(grads['log_sigma1']), 0.0)
        self.assertEqual(float(grads['log_sigma2']), 0.0)

    def test_gain_scale_divides_targets(self):
        model = randomize(tiny_model())
        _, _, base = model.loss_and_grads(self.samples)
        for name in ('value.out.w', 'value.out.b'):
            model.params[name] = np.zeros_like(model.params[name])
        _, _, unit = model.loss_and_grads(self.samples)
        model.gain_scale = 0.1
        _, _, scaled = model.loss_and_grads(self.samples)
        self.assertAlmostEqual(scaled['mse'], unit['mse'] * 100.0)
        self.assertNotEqual(base['mse'], unit['mse'])

    def test_evaluate_loss_empty(self):
        self.assertTrue(math.isnan(evaluate_loss(tiny_model(), [], 4)))


class TestOptimization(unittest.TestCase):
    """Тесты MomentumSGD и fit"""

    def test_momentum_step(self):
        params = {'w': np.array([1.0, 2.0])}
        optimizer = MomentumSGD(params, lr=0.1, momentum=0.5)
        grads = {'w': np.array([1.0, -1.0])}
        optimizer.step(params, grads)
        np.testing.assert_allclose(params['w'], [0.9, 2.1])
        optimizer.step(params, grads)
        np.testing.assert_allclose(params['w'], [0.9 - 0.15, 2.1 + 0.15])

    def test_two_plateaus_stop(self):
        """Без улучшения: первое плато понижает lr, второе останавливает итерацию"""
        model = randomize(tiny_model())
        samples = [make_sample(k) for k in range(4)]
        settings = TrainingSettings(epochs=10, learning_rate=1e-200, momentum=0.0, lr_decay=0.1,
                                    plateau_patience=1, batch_size=2, accumulation_steps=1)
        log = []
        fit(model, samples, samples[:2], settings, np.random.default_rng(0), 1, log, progress=False)
        self.assertEqual(len(log), 2)
        self.assertAlmostEqual(log[1]['lr'] / log[0]['lr'], 0.1)

    def test_fit_reduces_loss(self):
        model = randomize(tiny_model(), scale=0.2)
        samples = [make_sample(k) for k in range(4)]
        settings = TrainingSettings(epochs=5, learning_rate=0.05, momentum=0.5, plateau_patience=3,
                                    batch_size=2, accumulation_steps=2)
        before = evaluate_loss(model, samples, 4)
        log = []
        fit(model, samples, [], settings, np.random.default_rng(0), 1, log, progress=False)
        self.assertLess(evaluate_loss(model, samples, 4), before)
        self.assertTrue(all(math.isfinite(r['holdout_loss']) for r in log))


class TestCheckpoint(unittest.TestCase):
    """Тесты save_checkpoint / load_checkpoint"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        if self.temp_dir.exists():
            shutil.rmtree(self.temp_dir)

    def test_round_trip(self):
        model = randomize(tiny_model())
        model.gain_scale = 0.037
        path = self.temp_dir / "models" / "nbp.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        self.assertEqual(loaded.channels, model.channels)
        self.assertEqual(loaded.gain_scale, 0.037)
        self.assertEqual(list(loaded.params), list(model.params))
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])
        rng = np.random.default_rng(0)
        embedding = ExplorationEmbedding(rng.random((2, 8, 8)), rng.random((8, 8)), Pose((4, 4), 0))
        a, b = model.predict_arrays(embedding), loaded.predict_arrays(embedding)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_bad_files(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.temp_dir / "missing.ckpt")
        garbage = self.temp_dir / "garbage.ckpt"
        garbage.write_bytes(b"definitely not a model")
        with self.assertRaises(CheckpointError):
            load_checkpoint(garbage)
        good = self.temp_dir / "good.ckpt"
        save_checkpoint(tiny_model(), good)
        cut = self.temp_dir / "cut.ckpt"
        cut.write_bytes(good.read_bytes()[:-40])
        with self.assertRaises(CheckpointError):
            load_checkpoint(cut)


class TestOracle(unittest.TestCase):
    """Оракул совпадает с реальным исполнением пути до каждой позы окна"""

    def setUp(self):
        self.scene = room_scene()
        self.window = small_window()
        self.cam = small_camera()
        self.cfg = coverage_cfg()
        self.start = Pose((3, 3), 0)
        self.state = AgentState(self.scene, self.start, self.cam, self.cfg)
        self.gt = self.scene.gt_surfels

    def walk_path(self, previous, node, yaw):
        """Путь по дереву Дейкстры: промежуточные позы по ходу движения, последняя с рысканием yaw"""
        cells = reconstruct(previous, node)
        path = [self.start]
        for k in range(1, len(cells) - 1):
            world = self.window.window_to_cell(*cells[k], self.start)
            path.append(Pose(world, heading_yaw(cells[k - 1], cells[k])))
        path.append(Pose(self.window.window_to_cell(*node, self.start), yaw))
        return path

    def executed_gain(self, path, interp_frames=0):
        fresh = AgentState(self.scene, self.start, self.cam, self.cfg, interp_frames=interp_frames)
        before = covered_count(self.gt, fresh.cloud, self.cfg)
        result = execute_path(fresh, path, self.scene, budget=len(path))
        self.assertEqual(result.halt, HaltReason.PATH_COMPLETE)
        return (covered_count(self.gt, fresh.cloud, self.cfg) - before) / len(self.gt)

    def sampled_poses(self, previous, count, seed=0):
        rng = np.random.default_rng(seed)
        nodes = sorted(previous)
        center = (self.window.half, self.window.half)
        picks = [(center, yaw) for yaw in range(1, N_YAWS)]
        far = max(nodes, key=lambda n: len(reconstruct(previous, n)))
        picks += [(far, yaw) for yaw in range(N_YAWS)]
        for _ in range(count):
            picks.append((nodes[int(rng.integers(0, len(nodes)))], int(rng.integers(0, N_YAWS))))
        return picks

    def test_matches_execution(self):
        prediction = oracle_predict(self.scene, self.state, self.window, stride=1)
        values = prediction.value_map.values
        grid = obstacle_slice(self.scene, self.start, self.window)
        _, previous = dijkstra_tree(grid, (self.window.half, self.window.half))
        for node, yaw in self.sampled_poses(previous, 24):
            with self.subTest(node=node, yaw=yaw):
                expected = self.executed_gain(self.walk_path(previous, node, yaw))
                self.assertAlmostEqual(values[node[0], node[1], yaw], expected, places=12)

        center = self.window.half
        self.assertEqual(values[center, center, 0], 0.0)
        self.assertGreater(values.max(), 0.0)
        for u in range(self.window.grid):
            for v in range(self.window.grid):
                if (u, v) not in previous:
                    self.assertFalse(values[u, v].any())

    def test_matches_execution_with_interpolation(self):
        state = AgentState(self.scene, self.start, self.cam, self.cfg, interp_frames=1)
        values = oracle_predict(self.scene, state, self.window, stride=1).value_map.values
        grid = obstacle_slice(self.scene, self.start, self.window)
        _, previous = dijkstra_tree(grid, (self.window.half, self.window.half))
        for node, yaw in self.sampled_poses(previous, 8, seed=1):
            with self.subTest(node=node, yaw=yaw):
                expected = self.executed_gain(self.walk_path(previous, node, yaw), interp_frames=1)
                self.assertAlmostEqual(values[node[0], node[1], yaw], expected, places=12)

    def test_state_untouched(self):
        count, points = self.state.tracker.count, len(self.state.cloud)
        oracle_predict(self.scene, self.state, self.window, stride=1)
        self.assertEqual(self.state.tracker.count, count)
        self.assertEqual(len(self.state.cloud), points)

    def test_obstacle_map_is_slice(self):
        prediction = oracle_predict(self.scene, self.state, self.window)
        np.testing.assert_array_equal(prediction.obstacle_map.blocked(),
                                      obstacle_slice(self.scene, self.state.pose, self.window))

    def test_fully_covered_scene(self):
        tracker = CoverageTracker(self.gt, self.cfg)
        tracker.update(self.gt)
        state = AgentState(self.scene, Pose((3, 3), 0), self.cam, self.cfg, tracker=tracker)
        prediction = oracle_predict(self.scene, state, self.window)
        self.assertFalse(prediction.value_map.values.any())

    def test_stride_fill(self):
        exact = oracle_predict(self.scene, self.state, self.window, stride=1).value_map.values
        coarse = oracle_predict(self.scene, self.state, self.window, stride=2).value_map.values
        c = self.window.half
        for u in range(self.window.grid):
            for v in range(self.window.grid):
                if (u - c) % 2 == 0 and (v - c) % 2 == 0:
                    np.testing.assert_array_equal(coarse[u, v], exact[u, v])
        self.assertFalse(coarse[0, 0].any())

    def test_cache_reuse(self):
        cache = ViewCache()
        a = oracle_predict(self.scene, self.state, self.window, cache=cache)
        size = len(cache)
        b = oracle_predict(self.scene, self.state, self.window, cache=cache)
        self.assertEqual(len(cache), size)
        np.testing.assert_array_equal(a.value_map.values, b.value_map.values)

    def test_predictors(self):
        prediction = OraclePredictor(self.window, stride=2)(self.state)
        self.assertEqual(prediction.value_map.values.shape, (16, 16, N_YAWS))
        model = NBPModel(self.window.slices + 1, self.window.grid, (2, 3, 4))
        learned = LearnedPredictor(model, self.window)(self.state)
        self.assertFalse(learned.value_map.values.any())
        self.assertEqual(learned.obstacle_map.center, self.state.pose)


class TestTrain(unittest.TestCase):
    """Сквозной прогон обучения на крошечной конфигурации"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        if self.temp_dir.exists():
            shutil.rmtree(self.temp_dir)

    def config(self, **training):
        return Config(str(write_tiny_config(self.temp_dir, training=training)), strict=True)

    def test_smoke(self):
        config = self.config()
        result = train([room_scene()], config, progress=False)
        self.assertGreaterEqual(len(result.log), 1)
        for record in result.log:
            self.assertTrue(math.isfinite(record['train_loss']))
            self.assertTrue(math.isfinite(record['holdout_loss']))
        self.assertGreater(result.model.gain_scale, 0.0)
        with open(config.training.log_path, encoding='utf-8') as f:
            lines = [json.loads(line) for line in f]
        self.assertEqual(len(lines), len(result.log))

    def test_replay_balance(self):
        config = self.config(iterations=2, holdout_size=0)
        batches = {}
        memory = ReplayMemory()
        train([room_scene()], config, memory=memory, progress=False,
              batch_recorder=lambda it, batch: batches.__setitem__(it, list(batch)))
        first = len(batches[1])
        fresh = sum(1 for s in batches[2] if s.iteration == 2)
        replayed = sum(1 for s in batches[2] if s.iteration == 1)
        self.assertTrue(all(s.iteration == 1 for s in batches[1]))
        self.assertEqual(replayed, min(fresh, first))
        self.assertEqual(len(memory), first + fresh)

    def test_holdout_excluded(self):
        config = self.config(iterations=2)
        memory = ReplayMemory()
        seen = set()
        train([room_scene()], config, memory=memory, progress=False,
              batch_recorder=lambda it, batch: seen.update(id(s) for s in batch))
        self.assertFalse(seen & {id(s) for s in memory.holdout})

    def test_deterministic(self):
        a = train([room_scene()], self.config(), progress=False).model
        b = train([room_scene()], self.config(), progress=False).model
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_requires_scenes(self):
        with self.assertRaises(ValueError):
            train([], self.config(), progress=False)


if __name__ == '__main__':
    unittest.main()
