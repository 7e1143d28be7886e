# train_model.py
import sys
import argparse
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from config import Config, set_config
from learner import save_checkpoint, train
from worldgen import generate_scene_with_retries


def parse_args():
    parser = argparse.ArgumentParser(description='Обучение модели NBP на сгенерированных сценах')
    parser.add_argument('--config', '-c', default='configs/simple.yaml', help='YAML-конфигурация')
    parser.add_argument('--iterations', type=int, default=None, help='Число внешних итераций')
    return parser.parse_args()


def main():
    args = parse_args()
    print("🚀 ЗАПУСК ОБУЧЕНИЯ МОДЕЛИ NBP")
    print("=" * 50)

    config = set_config(Config(args.config, strict=True))
    if args.iterations is not None:
        config.training.iterations = args.iterations
    t = config.training

    scenes = [generate_scene_with_retries(config.difficulty_params(seed=config.scene.seed + k))
              for k in range(t.train_scenes)]
    print(f"📊 Подготовлено обучающих сцен: {len(scenes)}")
    for scene in scenes:
        print(f"   {scene.scene_id}: {len(scene.navigable_cells())} клеток, {len(scene.gt_surfels)} точек GT")

    print(f"\n🧠 Начинаем обучение: {t.iterations} итераций, режим {t.task_mode}...")
    result = train(scenes, config)

    checkpoint = Path(config.model.checkpoint)
    save_checkpoint(result.model, checkpoint)
    result.memory.save(Path(t.memory_path))

    sigma1, sigma2 = result.model.sigmas()
    print("\n✅ Модель успешно обучена!")
    print(f"\n📊 ИНФОРМАЦИЯ О МОДЕЛИ:")
    print(f"   Параметров: {result.model.parameter_count}")
    print(f"   Окно: {result.model.grid}×{result.model.grid}, каналы {list(result.model.channels)}")
    print(f"   σ1 = {sigma1:.4f}, σ2 = {sigma2:.4f}")
    print(f"   Масштаб выигрыша: {result.model.gain_scale:.5f}")
    if result.log:
        print(f"   Последний holdout loss: {result.log[-1]['holdout_loss']:.5f}")
    print(f"   Чекпоинт: {checkpoint}")

    print("\n" + "=" * 50)
    print("🏁 ОБУЧЕНИЕ ЗАВЕРШЕНО")


if __name__ == '__main__':
    main()
