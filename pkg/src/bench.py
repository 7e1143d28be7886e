"""
Стенд оценки: запуск эпизодов, агрегирование метрик по планировщикам, отчеты и
экспорт трасс эпизодов.
"""
import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import PLANNERS, PlannerSettings
from coverage import CoverageConfig, auc, completeness
from errors import CheckpointError, NBPLabError, ShapeMismatchError
from geometry import Pose, WindowSpec
from learner import LearnedPredictor, NBPModel, OraclePredictor
from logger import get_logger
from planning import (AgentState, FrontierPlanner, GreedyNBVPlanner, HaltReason, NBPPlanner,
                      Planner, RandomPlanner, execute_path, random_start_pose)
from progress import build_embedding, dump_embedding
from sensor import CameraModel, save_xyz
from worldgen import Scene, generate_scene_with_retries, load_scene

LEARNED_PLANNERS = ('nbp', 'nbp-oracle-obstacle', 'nbp-refresh')


@dataclass
class StepRecord:
    step: int
    cell: Tuple[int, int]
    yaw: int
    coverage: float


@dataclass
class EpisodeLog:
    scene_id: str
    planner: str
    trial: int
    seed: int
    start: Tuple[int, int, int]
    budget: int
    steps: List[StepRecord] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)
    final_coverage: float = 0.0
    auc: float = 0.0
    comp_pct: float = 0.0
    comp_cm: float = 0.0
    wall_time: float = 0.0
    aborted: Optional[str] = None

    @property
    def executed_steps(self) -> int:
        return len(self.steps) - 1

    def coverage_series(self) -> List[float]:
        return [r.coverage for r in self.steps]

    def to_dict(self) -> dict:
        data = asdict(self)
        data['steps'] = [[r.step, r.cell[0], r.cell[1], r.yaw, r.coverage] for r in self.steps]
        return data


@dataclass(frozen=True)
class EpisodeSettings:
    cam: CameraModel
    cov_cfg: CoverageConfig
    window: WindowSpec
    planner: PlannerSettings
    noise_std: float = 0.0
    interp_frames: int = 0
    dump_dir: Optional[str] = None


@dataclass
class BenchConfig:
    difficulty: str
    scene_count: int
    trials: int
    budget: int
    planners: List[str]
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials должно быть >= 1")
        unknown = [p for p in self.planners if p not in PLANNERS]
        if unknown:
            raise ValueError(f"неизвестные планировщики: {', '.join(unknown)}")

    @classmethod
    def from_config(cls, config, planners: Optional[Sequence[str]] = None) -> "BenchConfig":
        b = config.bench
        return cls(difficulty=config.scene.difficulty, scene_count=b.scene_count, trials=b.trials,
                   budget=config.budget(), planners=list(planners or b.planners), seed=b.seed,
                   threads=b.threads)


@dataclass
class Report:
    logs: List[EpisodeLog]
    summary: Dict[str, Dict[str, float]]


def episode_settings(config, extent: Optional[float] = None,
                     dump_dir: Optional[Path] = None) -> EpisodeSettings:
    return EpisodeSettings(cam=config.camera_model(), cov_cfg=config.coverage_config(),
                           window=config.window_spec(extent), planner=config.planner,
                           noise_std=config.sensor.depth_noise_std,
                           interp_frames=config.sensor.interp_frames,
                           dump_dir=str(dump_dir) if dump_dir is not None else None)


def make_planner(name: str, settings: EpisodeSettings, model: Optional[NBPModel] = None) -> Planner:
    p = settings.planner
    window = settings.window
    if name == 'random':
        return RandomPlanner()
    if name == 'fbe':
        return FrontierPlanner()
    if name == 'greedy-nbv':
        return GreedyNBVPlanner(p.greedy_radius)
    if name == 'nbp-oracle':
        predictor = OraclePredictor(window, p.oracle_stride, p.obstacle_threshold)
        return NBPPlanner(predictor, window, 'argmax', p.beta, p.goal_retries, name=name)
    if name in LEARNED_PLANNERS:
        if model is None:
            raise CheckpointError(f"для планировщика '{name}' нужен чекпоинт модели")
        if model.grid != window.grid:
            raise ShapeMismatchError(f"окно {window.grid} не совпадает с моделью {model.grid}")
        predictor = LearnedPredictor(model, window, p.obstacle_threshold)
        return NBPPlanner(predictor, window, 'argmax', p.beta, p.goal_retries,
                          obstacle_source='oracle' if name == 'nbp-oracle-obstacle' else 'predicted',
                          refresh=name == 'nbp-refresh', name=name)
    raise ValueError(f"неизвестный планировщик '{name}'")


def run_episode(scene: Scene, planner: Planner, start: Pose, T: int, rng: np.random.Generator,
                settings: EpisodeSettings, trial: int = 0, seed: int = 0) -> EpisodeLog:
    """Цикл решение/исполнение до исчерпания бюджета T; покрытие после каждого шага"""
    logger = get_logger()
    started = time.perf_counter()
    log = EpisodeLog(scene_id=scene.scene_id, planner=planner.name, trial=trial, seed=seed,
                     start=(start.cell[0], start.cell[1], start.yaw_index), budget=T)
    planner.reset(rng)
    state = AgentState(scene, start, settings.cam, settings.cov_cfg, settings.noise_std,
                       settings.interp_frames, rng)
    log.steps.append(StepRecord(0, start.cell, start.yaw_index, state.coverage))

    def observer(s: AgentState):
        log.steps.append(StepRecord(s.steps, s.pose.cell, s.pose.yaw_index, s.coverage))

    try:
        while state.steps < T:
            path = planner.plan(state)
            result = execute_path(state, path, scene, T - state.steps, observer)
            if result.halt != HaltReason.PATH_COMPLETE:
                log.events.append({'step': state.steps, 'halt': result.halt.value})
            if result.steps == 0 and state.steps < T:
                # каждое решение тратит хотя бы один шаг
                state.step_to(state.pose)
                observer(state)
                log.events.append({'step': state.steps, 'halt': 'wait'})
    except Exception as e:
        log.aborted = f"{type(e).__name__}: {e}"
        logger.error(f"❌ Эпизод {scene.scene_id}/{planner.name}/{trial} прерван: {log.aborted}")

    series = log.coverage_series()
    log.final_coverage = series[-1]
    log.auc = auc(series[1:], T) if T > 0 and len(series) > 1 else series[0]
    log.comp_pct, log.comp_cm = completeness(scene.gt_surfels, state.cloud, settings.cov_cfg)
    if settings.dump_dir:
        dump_final_state(state, settings, f"{planner.name}_{scene.scene_id}_{trial}")
    log.wall_time = time.perf_counter() - started
    return log


def dump_final_state(state: AgentState, settings: EpisodeSettings, prefix: str) -> List[Path]:
    """Облако эпизода в XYZ и каналы вложения в PNG"""
    out_dir = Path(settings.dump_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud_path = out_dir / f"{prefix}.xyz"
    save_xyz(state.cloud, cloud_path)
    embedding = build_embedding(state.cloud, state.history, state.pose, settings.window)
    return [cloud_path] + dump_embedding(embedding, out_dir, prefix)


@dataclass(frozen=True)
class EpisodeJob:
    scene: Scene
    scene_index: int
    trial: int
    planner: str
    budget: int
    seed: int


def start_pose_for(scene: Scene, seed: int, scene_index: int, trial: int) -> Pose:
    """Одинаковая стартовая поза для всех планировщиков в паре (сцена, попытка)"""
    return random_start_pose(scene, np.random.default_rng([seed, scene_index, trial]))


def _run_job(job: EpisodeJob, settings: EpisodeSettings, model: Optional[NBPModel]) -> EpisodeLog:
    start = start_pose_for(job.scene, job.seed, job.scene_index, job.trial)
    rng = np.random.default_rng([job.seed, job.scene_index, job.trial, PLANNERS.index(job.planner)])
    planner = make_planner(job.planner, settings, model)
    return run_episode(job.scene, planner, start, job.budget, rng, settings, job.trial, job.seed)


def aggregate(logs: Sequence[EpisodeLog]) -> Dict[str, Dict[str, float]]:
    """Среднее и стандартное отклонение (по генеральной совокупности) по эпизодам каждого планировщика"""
    grouped: Dict[str, List[EpisodeLog]] = {}
    for log in logs:
        grouped.setdefault(log.planner, []).append(log)
    summary = {}
    for planner in sorted(grouped):
        group = grouped[planner]
        row: Dict[str, float] = {'episodes': len(group),
                                 'aborted': sum(1 for g in group if g.aborted)}
        for metric in ('final_coverage', 'auc', 'comp_pct', 'comp_cm'):
            values = np.array([getattr(g, metric) for g in group], dtype=np.float64)
            row[f'{metric}_mean'] = float(values.mean())
            row[f'{metric}_std'] = float(values.std())
        summary[planner] = row
    return summary


def load_scenes(config, count: Optional[int] = None, scene_dir: Optional[Path] = None) -> List[Scene]:
    """Сцены из каталога (*.scene) или сгенерированные с seed = eval_seed_offset + k"""
    count = count if count is not None else config.bench.scene_count
    scene_dir = scene_dir or (Path(config.bench.scene_dir) if config.bench.scene_dir else None)
    if scene_dir is not None:
        paths = sorted(Path(scene_dir).glob("*.scene"))
        if not paths:
            raise NBPLabError(f"в {scene_dir} нет файлов сцен")
        return [load_scene(p) for p in paths[:count]]
    offset = config.bench.eval_seed_offset
    return [generate_scene_with_retries(config.difficulty_params(seed=offset + k)) for k in range(count)]


def evaluate(config, scenes: Sequence[Scene], bench: Optional[BenchConfig] = None,
             model: Optional[NBPModel] = None, extent: Optional[float] = None,
             progress: bool = True, dump_dir: Optional[Path] = None) -> Report:
    """Все планировщики на всех сценах и попытках; результаты отсортированы"""
    logger = get_logger()
    bench = bench or BenchConfig.from_config(config)
    if not scenes:
        raise NBPLabError("нет сцен для оценки")
    settings = episode_settings(config, extent, dump_dir)
    if any(p in LEARNED_PLANNERS for p in bench.planners) and model is None:
        raise CheckpointError("для обученных планировщиков нужен чекпоинт модели")

    jobs = [EpisodeJob(scene, s, trial, planner, bench.budget, bench.seed)
            for s, scene in enumerate(scenes)
            for trial in range(bench.trials)
            for planner in bench.planners]
    logger.start_session("Оценка", сцены=len(scenes), попытки=bench.trials, бюджет=bench.budget,
                         планировщики=", ".join(bench.planners), потоки=bench.threads)

    logs: List[EpisodeLog] = []
    if bench.threads > 1:
        with ProcessPoolExecutor(max_workers=bench.threads) as pool:
            futures = [pool.submit(_run_job, job, settings, model) for job in jobs]
            iterator = tqdm(futures, desc="Эпизоды", unit="эп") if progress else futures
            logs = [f.result() for f in iterator]
    else:
        iterator = tqdm(jobs, desc="Эпизоды", unit="эп") if progress else jobs
        logs = [_run_job(job, settings, model) for job in iterator]

    logs.sort(key=lambda g: (g.planner, g.scene_id, g.trial))
    summary = aggregate(logs)
    for planner, row in summary.items():
        logger.info(f"📊 {planner}: Cov={row['final_coverage_mean']:.3f}±{row['final_coverage_std']:.3f} "
                    f"AUC={row['auc_mean']:.3f}±{row['auc_std']:.3f}")
    logger.end_session("Оценка", эпизоды=len(logs))
    return Report(logs=logs, summary=summary)


# --- проверки порядка планировщиков ---

COVERAGE_ORDER = ('nbp-oracle', 'fbe', 'greedy-nbv', 'random')


def ordering_violations(summary: Dict[str, Dict[str, float]], margin: float = 0.20) -> List[str]:
    """Нарушения nbp-oracle >= fbe >= greedy-nbv >= random по среднему Final Coverage
    и отрыва nbp-oracle от random не меньше margin"""
    missing = [p for p in COVERAGE_ORDER if p not in summary]
    if missing:
        raise ValueError(f"в сводке нет планировщиков: {', '.join(missing)}")
    cov = {p: summary[p]['final_coverage_mean'] for p in COVERAGE_ORDER}
    problems = [f"{better} ({cov[better]:.3f}) < {worse} ({cov[worse]:.3f})"
                for better, worse in zip(COVERAGE_ORDER, COVERAGE_ORDER[1:])
                if cov[better] < cov[worse]]
    gap = cov['nbp-oracle'] - cov['random']
    if gap < margin:
        problems.append(f"nbp-oracle - random = {gap:.3f} < {margin:.2f}")
    return problems


def obstacle_ablation_violations(logs: Sequence[EpisodeLog], tolerance: float = 0.01) -> List[str]:
    """Точная карта препятствий не хуже предсказанной больше чем на tolerance на тех же (сцена, попытка)"""
    runs = {name: {(g.scene_id, g.trial): g.final_coverage for g in logs if g.planner == name}
            for name in ('nbp', 'nbp-oracle-obstacle')}
    if not runs['nbp'] or set(runs['nbp']) != set(runs['nbp-oracle-obstacle']):
        raise ValueError("nbp и nbp-oracle-obstacle должны идти на одном наборе (сцена, попытка)")
    keys = sorted(runs['nbp'])
    predicted = float(np.mean([runs['nbp'][k] for k in keys]))
    exact = float(np.mean([runs['nbp-oracle-obstacle'][k] for k in keys]))
    if exact < predicted - tolerance:
        return [f"nbp-oracle-obstacle ({exact:.3f}) ниже nbp ({predicted:.3f}) больше чем на {tolerance}"]
    return []


# --- вывод ---

SUMMARY_COLUMNS = ('planner', 'episodes', 'aborted',
                   'final_coverage_mean', 'final_coverage_std', 'auc_mean', 'auc_std',
                   'comp_pct_mean', 'comp_pct_std', 'comp_cm_mean', 'comp_cm_std')


def write_reports(report: Report, out_dir: Path, scenes: Optional[Sequence[Scene]] = None) -> Dict[str, Path]:
    """report.csv, report.txt, report.jsonl и трассы эпизодов в traces/"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {'csv': out_dir / "report.csv", 'txt': out_dir / "report.txt", 'jsonl': out_dir / "report.jsonl"}

    with open(paths['csv'], 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for planner, row in report.summary.items():
            writer.writerow([planner, row['episodes'], row['aborted']] +
                            [f"{row[c]:.6f}" for c in SUMMARY_COLUMNS[3:]])

    lines = [f"{'Планировщик':<22}{'Эпизоды':>9}{'Final Cov':>20}{'AUC':>20}{'Comp%':>20}{'Comp-cm':>20}"]
    for planner, row in report.summary.items():
        cells = [f"{row[m + '_mean']:.3f} ± {row[m + '_std']:.3f}"
                 for m in ('final_coverage', 'auc', 'comp_pct', 'comp_cm')]
        lines.append(f"{planner:<22}{row['episodes']:>9}" + "".join(f"{c:>20}" for c in cells))
    paths['txt'].write_text("\n".join(lines) + "\n", encoding='utf-8')

    with open(paths['jsonl'], 'w', encoding='utf-8') as f:
        for log in report.logs:
            f.write(json.dumps(log.to_dict(), ensure_ascii=False) + "\n")

    by_id = {scene.scene_id: scene for scene in scenes} if scenes else {}
    traces = out_dir / "traces"
    traces.mkdir(exist_ok=True)
    for log in report.logs:
        write_trace(log, traces / f"{log.planner}_{log.scene_id}_{log.trial}.jsonl", by_id.get(log.scene_id))
    return paths


def write_trace(log: EpisodeLog, path: Path, scene: Optional[Scene] = None):
    header = {'type': 'header', 'scene_id': log.scene_id, 'planner': log.planner,
              'trial': log.trial, 'seed': log.seed, 'budget': log.budget, 'aborted': log.aborted}
    if scene is not None:
        nx, nz = scene.shape
        header['walls'] = ["".join('#' if scene.wall_grid[i, j] else '.' for i in range(nx))
                           for j in range(nz)]
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for r in log.steps:
            f.write(json.dumps({'type': 'step', 'step': r.step, 'i': r.cell[0], 'j': r.cell[1],
                                'yaw': r.yaw, 'coverage': r.coverage}) + "\n")
        for event in log.events:
            f.write(json.dumps({'type': 'event', **event}) + "\n")


def read_trace(path: Path) -> Tuple[dict, List[dict], List[dict]]:
    header, steps, events = {}, [], []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            kind = record.pop('type', None)
            if kind == 'header':
                header = record
            elif kind == 'step':
                steps.append(record)
            elif kind == 'event':
                events.append(record)
    if not header:
        raise NBPLabError(f"{path}: нет заголовка трассы")
    return header, steps, events


def trace_export(trace_path: Path, out_dir: Path, scale: int = 8) -> Tuple[Path, Optional[Path]]:
    """CSV покрытия по шагам и PNG с траекторией поверх карты стен"""
    from PIL import Image, ImageDraw

    header, steps, _ = read_trace(trace_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(trace_path).stem
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'coverage', 'i', 'j', 'yaw'])
        for r in steps:
            writer.writerow([r['step'], f"{r['coverage']:.6f}", r['i'], r['j'], r['yaw']])

    walls = header.get('walls')
    if not walls:
        get_logger().warning(f"⚠️  В трассе {trace_path} нет карты стен, PNG не создан")
        return csv_path, None
    nz, nx = len(walls), len(walls[0])
    image = Image.new('RGB', (nx * scale, nz * scale), (255, 255, 255))
    draw = ImageDraw.Draw(image)
    for j, row in enumerate(walls):
        for i, ch in enumerate(row):
            if ch == '#':
                draw.rectangle([i * scale, j * scale, (i + 1) * scale - 1, (j + 1) * scale - 1], fill=(70, 70, 70))
    points = [((r['i'] + 0.5) * scale, (r['j'] + 0.5) * scale) for r in steps]
    if len(points) > 1:
        draw.line(points, fill=(220, 40, 40), width=max(1, scale // 4))
    if points:
        x, y = points[0]
        draw.ellipse([x - scale / 3, y - scale / 3, x + scale / 3, y + scale / 3], fill=(40, 160, 60))
    png_path = out_dir / f"{stem}.png"
    image.save(png_path)
    return csv_path, png_path
