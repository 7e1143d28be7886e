"""
Главный файл для запуска лаборатории активного 3D-картирования (NBP)
"""
import sys
import argparse
from pathlib import Path

# Добавляем src в путь
sys.path.insert(0, str(Path(__file__).parent / "src"))

from logger import get_logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Лаборатория активного картирования: генерация сцен, обучение NBP и оценка планировщиков',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Примеры использования:
  python main.py gen-scenes --config configs/normal.yaml --count 10
  python main.py rollout --config configs/simple.yaml --scenes 2
  python main.py train --config configs/normal.yaml --resume-memory
  python main.py eval --config configs/normal.yaml --planners random,fbe,nbp-oracle
  python main.py eval --planners nbp-oracle --extent 8    # диапазон окна
  python main.py trace-export results/traces/fbe_scene-1000_0.jsonl
        """
    )
    parser.add_argument('--config', '-c', type=str, default='config.yaml',
                        help='YAML-конфигурация (по умолчанию: config.yaml)')
    parser.add_argument('--seed', type=int, default=None, help='Главный seed (перекрывает конфиг)')
    parser.add_argument('--out', '-o', type=str, default=None, help='Каталог результатов')
    parser.add_argument('--threads', type=int, default=None, help='Число рабочих процессов')
    parser.add_argument('--verbose', '-v', action='store_true', help='Подробный вывод')
    parser.add_argument('--no-progress', action='store_true', help='Отключить прогресс-бар')

    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-scenes', help='Сгенерировать сцены и сохранить в out/scenes')
    gen.add_argument('--count', type=int, default=None, help='Число сцен (по умолчанию bench.scene_count)')
    gen.add_argument('--offset', type=int, default=0, help='Смещение seed сцен')

    rollout = sub.add_parser('rollout', help='Собрать обучающие примеры в файл памяти')
    rollout.add_argument('--scenes', type=int, default=None, help='Число обучающих сцен')
    rollout.add_argument('--length', type=int, default=None, help='Длина роллаута')
    rollout.add_argument('--checkpoint', type=str, default=None, help='Чекпоинт модели (иначе новая)')

    train = sub.add_parser('train', help='Обучить модель NBP')
    train.add_argument('--iterations', type=int, default=None, help='Число внешних итераций')
    train.add_argument('--resume-memory', action='store_true', help='Загрузить память воспроизведения')
    train.add_argument('--checkpoint', type=str, default=None, help='Куда сохранить чекпоинт')

    ev = sub.add_parser('eval', help='Оценить планировщики')
    ev.add_argument('--planners', type=str, default=None, help='Список через запятую')
    ev.add_argument('--extent', type=float, default=None, help='Протяженность окна, м')
    ev.add_argument('--checkpoint', type=str, default=None, help='Чекпоинт для обученных планировщиков')
    ev.add_argument('--scenes', type=int, default=None, help='Число сцен')
    ev.add_argument('--trials', type=int, default=None, help='Попыток на сцену')
    ev.add_argument('--scene-dir', type=str, default=None, help='Каталог с файлами *.scene')
    ev.add_argument('--dump-dir', type=str, default=None,
                    help='Каталог для облаков (.xyz) и PNG-вложений в конце эпизодов')

    trace = sub.add_parser('trace-export', help='Трасса эпизода -> CSV и PNG')
    trace.add_argument('trace', type=str, help='Файл трассы (.jsonl)')
    return parser


def _apply_overrides(config, args):
    if args.seed is not None:
        config.scene.seed = args.seed
        config.training.seed = args.seed
        config.bench.seed = args.seed
    if args.threads is not None:
        config.bench.threads = max(1, args.threads)
    if args.out is not None:
        config.bench.out_dir = args.out


def cmd_gen_scenes(config, args, logger) -> int:
    from worldgen import generate_scene_with_retries, nav_complexity, save_scene

    out_dir = Path(config.bench.out_dir) / "scenes"
    out_dir.mkdir(parents=True, exist_ok=True)
    count = args.count if args.count is not None else config.bench.scene_count
    for k in range(count):
        scene = generate_scene_with_retries(config.difficulty_params(seed=config.scene.seed + args.offset + k))
        path = out_dir / f"{scene.scene_id}.scene"
        save_scene(scene, path)
        complexity = nav_complexity(scene, 0.05, seed=k)
        logger.info(f"💾 {path}: {len(scene.navigable_cells())} клеток, "
                    f"{len(scene.gt_surfels)} точек GT, сложность ≥ {complexity:.2f}")
    logger.info(f"✅ Сгенерировано сцен: {count}")
    return 0


def _training_scenes(config, count=None):
    from worldgen import generate_scene_with_retries
    count = count if count is not None else config.training.train_scenes
    return [generate_scene_with_retries(config.difficulty_params(seed=config.scene.seed + k))
            for k in range(count)]


def cmd_rollout(config, args, logger) -> int:
    import numpy as np
    from tqdm import tqdm
    from labels import ReplayMemory, RolloutContext, rollout_collect
    from learner import LearnedPredictor, NBPModel, load_checkpoint
    from planning import random_start_pose

    window = config.window_spec()
    if args.checkpoint:
        model = load_checkpoint(Path(args.checkpoint))
    else:
        model = NBPModel(window.slices + 1, window.grid, config.model.channels,
                         seed=config.model.init_seed, density_scale=config.window.density_scale)
    predictor = LearnedPredictor(model, window, config.planner.obstacle_threshold)
    ctx = RolloutContext(window=window, cam=config.camera_model(), cov_cfg=config.coverage_config(),
                         noise_std=config.sensor.depth_noise_std, interp_frames=config.sensor.interp_frames,
                         goal_retries=config.planner.goal_retries,
                         obstacle_threshold=config.planner.obstacle_threshold)
    length = args.length if args.length is not None else config.training.rollout_length
    rng = np.random.default_rng(config.training.seed)
    scenes = _training_scenes(config, args.scenes)
    samples = []
    iterator = scenes if args.no_progress else tqdm(scenes, desc="Роллауты", unit="сцена")
    for scene in iterator:
        start = random_start_pose(scene, rng)
        samples.extend(rollout_collect(scene, predictor, start, length, config.planner.beta, rng, ctx))
    memory_path = Path(config.training.memory_path)
    ReplayMemory.append_file(memory_path, samples)
    logger.info(f"💾 Добавлено {len(samples)} примеров в {memory_path}")
    return 0


def cmd_train(config, args, logger) -> int:
    from labels import ReplayMemory
    from learner import save_checkpoint, train

    if args.iterations is not None:
        config.training.iterations = args.iterations
    memory = None
    memory_path = Path(config.training.memory_path)
    if args.resume_memory:
        if not memory_path.exists():
            logger.error(f"❌ Файл памяти не найден: {memory_path}")
            return 1
        memory = ReplayMemory.load(memory_path)
        logger.info(f"📂 Загружено из памяти: {len(memory)} примеров, holdout {len(memory.holdout)}")
    result = train(_training_scenes(config), config, memory=memory, progress=not args.no_progress)
    checkpoint = Path(args.checkpoint or config.model.checkpoint)
    save_checkpoint(result.model, checkpoint)
    result.memory.save(memory_path)
    logger.info(f"💾 Чекпоинт сохранен: {checkpoint}")
    return 0


def cmd_eval(config, args, logger) -> int:
    from bench import LEARNED_PLANNERS, BenchConfig, evaluate, load_scenes, write_reports
    from learner import load_checkpoint

    planners = [p.strip() for p in args.planners.split(',') if p.strip()] if args.planners else None
    bench = BenchConfig.from_config(config, planners)
    if args.trials is not None:
        bench.trials = args.trials
    model = None
    if any(p in LEARNED_PLANNERS for p in bench.planners):
        model = load_checkpoint(Path(args.checkpoint or config.model.checkpoint))
    scenes = load_scenes(config, args.scenes, Path(args.scene_dir) if args.scene_dir else None)
    report = evaluate(config, scenes, bench, model=model, extent=args.extent, progress=not args.no_progress,
                      dump_dir=Path(args.dump_dir) if args.dump_dir else None)
    paths = write_reports(report, Path(config.bench.out_dir), scenes)
    logger.info(f"💾 Отчет: {paths['csv']}")
    return 0


def cmd_trace_export(config, args, logger) -> int:
    from bench import trace_export

    out_dir = Path(args.out) if args.out else Path(args.trace).parent
    csv_path, png_path = trace_export(Path(args.trace), out_dir)
    logger.info(f"💾 {csv_path}" + (f", {png_path}" if png_path else ""))
    return 0


COMMANDS = {
    'gen-scenes': cmd_gen_scenes,
    'rollout': cmd_rollout,
    'train': cmd_train,
    'eval': cmd_eval,
    'trace-export': cmd_trace_export,
}


def main(argv=None) -> int:
    """Главная функция с CLI интерфейсом"""
    args = build_parser().parse_args(argv)

    logger = get_logger()
    logger.set_verbose(args.verbose)

    from config import Config, set_config
    from errors import NBPLabError
    try:
        if args.command == 'trace-export':
            return cmd_trace_export(None, args, logger)
        config = set_config(Config(args.config, strict=True))
        _apply_overrides(config, args)
        return COMMANDS[args.command](config, args, logger)
    except KeyboardInterrupt:
        logger.warning("\n⚠️  Прервано пользователем")
        return 1
    except (NBPLabError, ValueError, OSError) as e:
        logger.error(f"❌ {e}")
        return 2
    except Exception as e:
        logger.error(f"❌ Критическая ошибка: {e}")
        import traceback
        traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())
