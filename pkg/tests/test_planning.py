"""
Тесты планирования: Больцман, Дейкстра, исполнение пути и планировщики
"""
import sys
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from coverage import covered_count
from errors import PlanningError, PoseError
from geometry import N_YAWS, Pose
from planning import (FREE, OBSTACLE, UNKNOWN, AgentState, FrontierPlanner, GreedyNBVPlanner,
                      HaltReason, KnownMap, NBPPlanner, ObstacleMap, RandomPlanner, ValueMap,
                      argmax_goal, argmax_index, assign_orientations, boltzmann_index,
                      boltzmann_probs, boltzmann_sample, candidate_poses, dijkstra_path,
                      execute_path, frontier_goal, grid_dijkstra, headed_path, random_policy,
                      random_start_pose)
from scene_factory import (StubPredictor, coverage_cfg, room_scene, small_camera, small_window,
                           two_room_scene)
from worldgen import grid_bfs, obstacle_slice


def make_state(scene=None, cell=(3, 3), yaw=0) -> AgentState:
    scene = scene or room_scene()
    return AgentState(scene, Pose(cell, yaw), small_camera(), coverage_cfg())


class TestBoltzmann(unittest.TestCase):
    """Тесты выборки Больцмана и argmax"""

    def test_two_cells(self):
        """P(первая) = e / (e + 1) при β = 1"""
        rng = np.random.default_rng(0)
        draws = [boltzmann_index(np.array([1.0, 0.0]), 1.0, rng) for _ in range(10000)]
        freq = draws.count(0) / len(draws)
        self.assertAlmostEqual(freq, 0.7311, delta=0.015)

    def test_uniform_chi_square(self):
        rng = np.random.default_rng(1)
        counts = np.bincount([boltzmann_index(np.zeros(4), 0.5, rng) for _ in range(10000)], minlength=4)
        chi2 = float(np.sum((counts - 2500.0) ** 2 / 2500.0))
        self.assertLess(chi2, 11.345)

    def test_low_temperature_is_argmax(self):
        rng = np.random.default_rng(2)
        values = np.array([0.2, 0.5, 0.1, 0.49])
        draws = [boltzmann_index(values, 1e-6, rng) for _ in range(2000)]
        self.assertGreaterEqual(draws.count(1) / len(draws), 0.999)

    def test_probs_stable(self):
        probs = boltzmann_probs(np.array([1000.0, 999.0]), 1.0)
        self.assertTrue(np.all(np.isfinite(probs)))
        self.assertAlmostEqual(probs.sum(), 1.0)

    def test_invalid_inputs(self):
        with self.assertRaises(PlanningError):
            boltzmann_probs(np.array([0.0, np.nan]), 1.0)
        with self.assertRaises(PlanningError):
            boltzmann_probs(np.array([0.0, 1.0]), 0.0)
        with self.assertRaises(PlanningError):
            boltzmann_probs(np.array([-np.inf, -np.inf]), 1.0)

    def test_argmax_tie_lowest_index(self):
        self.assertEqual(argmax_index(np.array([0.3, 0.7, 0.7, 0.1])), 1)
        self.assertEqual(argmax_index(np.zeros((2, 2, 8))), 0)


class TestMaps(unittest.TestCase):
    """Тесты ValueMap и ObstacleMap"""

    def setUp(self):
        self.window = small_window()
        self.center = Pose((3, 3), 0)

    def test_value_map_index_round_trip(self):
        values = np.zeros((16, 16, N_YAWS))
        m = ValueMap(values, self.window, self.center)
        pose = Pose((5, 1), 6)
        self.assertEqual(m.pose_at(m.index_of(pose)), pose)
        self.assertIsNone(m.index_of(Pose((30, 3), 0)))

    def test_value_map_rejects_non_finite(self):
        values = np.zeros((16, 16, N_YAWS))
        values[1, 2, 3] = np.inf
        with self.assertRaises(PlanningError):
            ValueMap(values, self.window, self.center)
        with self.assertRaises(PlanningError):
            ValueMap(np.zeros((16, 16, 4)), self.window, self.center)

    def test_argmax_goal_and_sample(self):
        values = np.zeros((16, 16, N_YAWS))
        values[10, 9, 4] = 1.0
        m = ValueMap(values, self.window, self.center)
        self.assertEqual(argmax_goal(m), Pose((5, 4), 4))
        self.assertEqual(boltzmann_sample(m, 1e-6, np.random.default_rng(0)), Pose((5, 4), 4))

    def test_obstacle_map_center_free(self):
        o = ObstacleMap(np.ones((16, 16)), self.window, self.center)
        blocked = o.blocked()
        self.assertFalse(blocked[8, 8])
        self.assertEqual(int(blocked.sum()), 16 * 16 - 1)
        with self.assertRaises(PlanningError):
            ObstacleMap(np.full((16, 16), 1.5), self.window, self.center)


class TestDijkstra(unittest.TestCase):
    """Маршруты сравниваются с BFS"""

    def check_path(self, blocked, path, start, goal):
        self.assertEqual(path[0], start)
        self.assertEqual(path[-1], goal)
        for a, b in zip(path[:-1], path[1:]):
            self.assertEqual(abs(a[0] - b[0]) + abs(a[1] - b[1]), 1)
        for cell in path:
            self.assertFalse(blocked[cell])

    def test_random_maps_against_bfs(self):
        rng = np.random.default_rng(0)
        for _ in range(15):
            blocked = rng.random((12, 12)) < 0.3
            start = (int(rng.integers(0, 12)), int(rng.integers(0, 12)))
            blocked[start] = False
            dist = grid_bfs(~blocked, start)
            for goal in map(tuple, np.argwhere(~blocked)):
                path = grid_dijkstra(blocked, start, goal)
                if dist[goal] < 0:
                    self.assertIsNone(path)
                    continue
                self.assertEqual(len(path) - 1, dist[goal])
                self.check_path(blocked, path, start, goal)

    def test_sub_path_optimality(self):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 40:
            blocked = rng.random((12, 12)) < 0.25
            blocked[0, 0] = False
            reachable = np.argwhere(grid_bfs(~blocked, (0, 0)) > 4)
            if not len(reachable):
                continue
            goal = tuple(reachable[int(rng.integers(0, len(reachable)))])
            path = grid_dijkstra(blocked, (0, 0), goal)
            i, j = sorted(rng.choice(len(path), size=2, replace=False))
            self.assertEqual(j - i, grid_bfs(~blocked, path[i])[path[j]])
            checked += 1

    def test_blocked_endpoints(self):
        blocked = np.zeros((5, 5), dtype=bool)
        blocked[2, :] = True
        self.assertIsNone(grid_dijkstra(blocked, (0, 0), (4, 4)))
        self.assertIsNone(grid_dijkstra(blocked, (0, 0), (2, 2)))
        self.assertIsNone(grid_dijkstra(blocked, (0, 0), (9, 9)))
        with self.assertRaises(PlanningError):
            grid_dijkstra(blocked, (2, 0), (0, 0))
        self.assertEqual(grid_dijkstra(blocked, (1, 1), (1, 1)), [(1, 1)])

    def test_world_path(self):
        scene = room_scene()
        window = small_window()
        center = Pose((3, 3), 0)
        o = ObstacleMap.from_grid(obstacle_slice(scene, center, window), window, center)
        path = dijkstra_path(o, (3, 3), (5, 6))
        self.assertEqual(path[0], (3, 3))
        self.assertEqual(path[-1], (5, 6))
        self.assertEqual(len(path), 6)
        self.assertTrue(all(scene.is_traversable(c) for c in path))
        self.assertIsNone(dijkstra_path(o, (3, 3), (0, 3)))
        self.assertIsNone(dijkstra_path(o, (3, 3), (40, 3)))


class TestOrientations(unittest.TestCase):
    def test_argmax_per_position(self):
        window = small_window()
        center = Pose((3, 3), 0)
        values = np.zeros((16, 16, N_YAWS))
        values[8, 8, 3] = 1.0
        values[9, 8, 6] = 1.0
        path = assign_orientations([(3, 3), (4, 3), (5, 3)], ValueMap(values, window, center))
        self.assertEqual([p.yaw_index for p in path], [3, 6, 0])

    def test_sample_needs_rng(self):
        window = small_window()
        m = ValueMap(np.zeros((16, 16, N_YAWS)), window, Pose((3, 3), 0))
        with self.assertRaises(PlanningError):
            assign_orientations([(3, 3)], m, mode='sample')
        with self.assertRaises(PlanningError):
            assign_orientations([(30, 3)], m)

    def test_headed_path(self):
        path = headed_path([(3, 3), (4, 3), (4, 4), (4, 4)], Pose((3, 3), 5))
        self.assertEqual([p.yaw_index for p in path], [5, 0, 2, 2])
        self.assertEqual(headed_path([(3, 3), (4, 3)], Pose((3, 3), 5), final_yaw=7)[-1], Pose((4, 3), 7))


class TestAgentState(unittest.TestCase):
    """Тесты AgentState и execute_path"""

    def test_start_off_navgrid(self):
        with self.assertRaises(PoseError):
            make_state(cell=(0, 0))

    def test_initial_observation(self):
        state = make_state()
        self.assertEqual(state.steps, 0)
        self.assertEqual(state.history, [Pose((3, 3), 0)])
        self.assertGreater(len(state.cloud), 0)
        self.assertGreater(state.coverage, 0.0)

    def test_tracker_matches_recount(self):
        state = make_state(two_room_scene(), cell=(2, 2))
        path = headed_path([(2, 2), (3, 2), (4, 2), (5, 2), (5, 3), (6, 3), (7, 3)], state.pose)
        execute_path(state, path, state.scene, 100)
        gt = state.scene.gt_surfels
        self.assertEqual(state.tracker.count, covered_count(gt, state.cloud, state.cov_cfg))

    def test_complete_path(self):
        state = make_state()
        seen = []
        path = [Pose((3, 3), 0), Pose((4, 3), 0), Pose((5, 3), 1)]
        result = execute_path(state, path, state.scene, 10, observer=lambda s: seen.append(s.pose))
        self.assertEqual(result.halt, HaltReason.PATH_COMPLETE)
        self.assertEqual(result.steps, 2)
        self.assertEqual(state.pose, Pose((5, 3), 1))
        self.assertEqual(seen, path[1:])

    def test_collision_halts(self):
        state = make_state(cell=(5, 3))
        path = [Pose((5, 3), 0), Pose((6, 3), 0), Pose((7, 3), 0), Pose((6, 3), 0)]
        result = execute_path(state, path, state.scene, 10)
        self.assertEqual(result.halt, HaltReason.COLLISION)
        self.assertEqual(result.steps, 1)
        self.assertEqual(state.steps, 1)
        self.assertEqual(state.pose.cell, (6, 3))

    def test_budget_halts(self):
        state = make_state(cell=(2, 3))
        path = [Pose((2, 3), 0), Pose((3, 3), 0), Pose((4, 3), 0), Pose((5, 3), 0)]
        result = execute_path(state, path, state.scene, 1)
        self.assertEqual(result.halt, HaltReason.BUDGET)
        self.assertEqual(result.steps, 1)

    def test_non_adjacent_step_rejected(self):
        """Перескок через клетку не исполняется и не тратит шаг"""
        state = make_state(cell=(2, 3))
        path = [Pose((2, 3), 0), Pose((3, 3), 0), Pose((5, 3), 0), Pose((6, 3), 0)]
        result = execute_path(state, path, state.scene, 10)
        self.assertEqual(result.halt, HaltReason.INVALID_STEP)
        self.assertEqual(result.steps, 1)
        self.assertEqual(state.pose.cell, (3, 3))
        diagonal = execute_path(state, [state.pose, Pose((4, 4), 0)], state.scene, 10)
        self.assertEqual(diagonal.halt, HaltReason.INVALID_STEP)
        self.assertEqual(state.steps, 1)

    def test_wait_costs_step(self):
        state = make_state()
        result = execute_path(state, [state.pose, state.pose], state.scene, 5)
        self.assertEqual(result.steps, 1)
        self.assertEqual(state.steps, 1)

    def test_path_must_start_at_agent(self):
        state = make_state()
        with self.assertRaises(PlanningError):
            execute_path(state, [Pose((4, 3), 0), Pose((5, 3), 0)], state.scene, 5)

    def test_interpolated_frames_add_points(self):
        plain = make_state(cell=(2, 2))
        smooth = AgentState(room_scene(), Pose((2, 2), 0), small_camera(), coverage_cfg(), interp_frames=2)
        for state in (plain, smooth):
            execute_path(state, [Pose((2, 2), 0), Pose((2, 3), 4)], state.scene, 5)
        self.assertGreaterEqual(len(smooth.cloud), len(plain.cloud))


class TestKnownMap(unittest.TestCase):
    """Тесты известной карты и фронтира"""

    def test_observation_marks(self):
        state = make_state()
        known = state.known.state
        self.assertEqual(known[3, 3], FREE)
        self.assertTrue((known == OBSTACLE).any())
        # внутренние клетки без соседних стен не могут стать препятствием
        self.assertFalse((known[2:6, 2:6] == OBSTACLE).any())
        obstacle_cells = np.argwhere(known == OBSTACLE)
        self.assertTrue(all(state.scene.wall_grid[i, j] for i, j in obstacle_cells))

    def test_frontier_goal(self):
        known = KnownMap((5, 5), 0.5, 3.0)
        known.state[0:3, 1:4] = FREE
        self.assertEqual(frontier_goal(known, (1, 2)), (1, 1))

    def test_no_frontier(self):
        known = KnownMap((3, 3), 0.5, 3.0)
        known.state[:, :] = OBSTACLE
        known.state[1, 1] = FREE
        self.assertIsNone(frontier_goal(known, (1, 1)))

    def test_traversed_never_obstacle(self):
        known = KnownMap((4, 4), 0.5, 3.0)
        known.mark_traversed((1, 1))
        known.update(np.array([[0.75, 1.0, 0.75]]), np.array([0.0, 1.0, 0.75]))
        self.assertEqual(known.state[1, 1], FREE)
        self.assertEqual(known.state[2, 2], UNKNOWN)


class TestPlanners(unittest.TestCase):
    """Тесты планировщиков"""

    def setUp(self):
        self.window = small_window()

    def test_random_policy_adjacent(self):
        state = make_state(cell=(1, 1))
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = random_policy(state, rng)
            self.assertEqual(abs(pose.cell[0] - 1) + abs(pose.cell[1] - 1), 1)
            self.assertTrue(state.scene.is_traversable(pose.cell))

    def test_random_start_pose(self):
        scene = two_room_scene()
        rng = np.random.default_rng(0)
        for _ in range(20):
            self.assertTrue(scene.is_traversable(random_start_pose(scene, rng).cell))

    def test_random_planner(self):
        planner = RandomPlanner()
        planner.reset(np.random.default_rng(0))
        state = make_state()
        path = planner.plan(state)
        self.assertEqual(path[0], state.pose)
        self.assertEqual(len(path), 2)

    def test_frontier_planner(self):
        planner = FrontierPlanner()
        planner.reset(np.random.default_rng(0))
        state = make_state()
        path = planner.plan(state)
        self.assertEqual(path[0], state.pose)
        self.assertGreaterEqual(len(path), 2)

    def test_candidate_order(self):
        scene = room_scene()
        poses = candidate_poses(scene, (1, 3), 1)
        cells = [p.cell for p in poses[::N_YAWS]]
        self.assertEqual(cells, [(1, 2), (1, 3), (1, 4), (2, 3)])
        self.assertEqual(len(poses), 4 * N_YAWS)

    def test_greedy_matches_brute_force(self):
        state = make_state(cell=(2, 2))
        scene = state.scene
        best, best_gain = None, -1
        for pose in candidate_poses(scene, (2, 2), 1):
            cloud = state.cloud.copy()
            cloud.insert(state.view_points(pose.position(scene.cell_size, scene.agent_height), pose.yaw))
            gain = covered_count(scene.gt_surfels, cloud, state.cov_cfg) - state.tracker.count
            if gain > best_gain:
                best, best_gain = pose, gain
        planner = GreedyNBVPlanner(radius=1)
        planner.reset(np.random.default_rng(0))
        path = planner.plan(state)
        self.assertEqual(path[-1], best)
        self.assertEqual(path[0], state.pose)

    def value_map_with(self, entries):
        values = np.zeros((16, 16, N_YAWS))
        for (u, v, yaw), value in entries.items():
            values[u, v, yaw] = value
        return values

    def test_nbp_goes_to_argmax(self):
        state = make_state()
        values = self.value_map_with({(10, 10, 2): 1.0})
        planner = NBPPlanner(StubPredictor(self.window, values), self.window)
        planner.reset(np.random.default_rng(0))
        path = planner.plan(state)
        self.assertEqual(path[0], state.pose)
        self.assertEqual(path[-1], Pose((5, 5), 2))
        self.assertEqual(len(path), 5)
        result = execute_path(state, path, state.scene, 10)
        self.assertEqual(result.halt, HaltReason.PATH_COMPLETE)

    def test_nbp_rejects_unreachable_and_current(self):
        state = make_state()
        # (15, 8) -> клетка (10, 3) вне сцены; (8, 8, 0): текущая поза
        values = self.value_map_with({(15, 8, 0): 3.0, (8, 8, 0): 2.0, (10, 10, 2): 1.0})
        planner = NBPPlanner(StubPredictor(self.window, values), self.window, obstacle_source='oracle')
        planner.reset(np.random.default_rng(0))
        self.assertEqual(planner.plan(state)[-1], Pose((5, 5), 2))

    def test_nbp_turn_in_place(self):
        state = make_state()
        values = self.value_map_with({(8, 8, 5): 1.0})
        planner = NBPPlanner(StubPredictor(self.window, values), self.window)
        planner.reset(np.random.default_rng(0))
        self.assertEqual(planner.plan(state), [state.pose, Pose((3, 3), 5)])

    def test_nbp_fallback_when_all_blocked(self):
        state = make_state()
        predictor = StubPredictor(self.window, obstacle_prob=1.0)
        planner = NBPPlanner(predictor, self.window, goal_retries=32)
        planner.reset(np.random.default_rng(0))
        prediction = predictor(state)
        self.assertIsNone(planner.choose_path(state, prediction.value_map, prediction.obstacle_map,
                                              np.random.default_rng(0)))
        path = planner.plan(state)
        self.assertEqual(path[0], state.pose)
        self.assertGreaterEqual(len(path), 2)

    def test_nbp_refresh_single_step(self):
        state = make_state()
        values = self.value_map_with({(11, 11, 2): 1.0})
        planner = NBPPlanner(StubPredictor(self.window, values), self.window, refresh=True)
        planner.reset(np.random.default_rng(0))
        path = planner.plan(state)
        self.assertEqual(len(path), 2)
        self.assertEqual(path[0], state.pose)

    def test_nbp_sample_mode_reproducible(self):
        values = np.random.default_rng(5).random((16, 16, N_YAWS))
        paths = []
        for _ in range(2):
            state = make_state()
            planner = NBPPlanner(StubPredictor(self.window, values), self.window, mode='sample',
                                 beta=0.05, obstacle_source='oracle')
            planner.reset(np.random.default_rng(9))
            paths.append(planner.plan(state))
        self.assertEqual(paths[0], paths[1])


if __name__ == '__main__':
    unittest.main()
