import yaml
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Set
from dataclasses import dataclass, field, fields, asdict
from logger import get_logger
from errors import ConfigError

DIFFICULTIES = ('simple', 'normal', 'hard', 'insane')
PLANNERS = ('random', 'fbe', 'greedy-nbv', 'nbp', 'nbp-oracle', 'nbp-oracle-obstacle', 'nbp-refresh')
TASK_MODES = ('multi', 'value_only', 'obstacle_only')


@dataclass
class SceneSettings:
    difficulty: str = 'normal'
    cell_size: float = 0.5
    wall_height: float = 3.0
    agent_height: float = 1.65
    grid_size: List[int] = field(default_factory=lambda: [32, 32])
    room_count_range: List[int] = field(default_factory=lambda: [4, 6])
    room_size_range: List[float] = field(default_factory=lambda: [2.0, 5.0])
    corridor_width: float = 1.0
    door_width: float = 1.0
    window_fraction: float = 0.2
    branching_factor: float = 0.3
    seed: int = 0
    max_retries: int = 200


@dataclass
class SensorSettings:
    width: int = 64
    height: int = 48
    hfov: float = 90.0
    depth_noise_std: float = 0.0
    interp_frames: int = 0


@dataclass
class WindowSettings:
    extent: float = 16.0
    slices: int = 4
    density_scale: float = 8.0  # нормировка счетчиков перед подачей в сеть


@dataclass
class CoverageSettings:
    epsilon: Optional[float] = None  # None -> cell_size
    comp_threshold: float = 0.25
    comp_cap: float = 2.0


@dataclass
class PlannerSettings:
    beta: float = 0.1
    obstacle_threshold: float = 0.5
    goal_retries: int = 32
    greedy_radius: int = 1
    oracle_stride: int = 2


@dataclass
class ModelSettings:
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    init_seed: int = 0
    checkpoint: str = 'models/nbp.ckpt'


@dataclass
class TrainingSettings:
    iterations: int = 5
    easy_iterations: int = 1
    trajectories_first: int = 2
    trajectories_rest: int = 1
    rollout_length: int = 60
    curriculum_min_step: int = 10
    epochs: int = 10
    batch_size: int = 32
    accumulation_steps: int = 4
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_decay: float = 0.1
    plateau_patience: int = 2
    holdout_size: int = 200
    gain_scale: Optional[float] = None  # None -> максимум выигрыша первого сбора
    use_replay: bool = True
    task_mode: str = 'multi'
    learn_sigmas: bool = True
    train_scenes: int = 10
    seed: int = 0
    memory_path: str = 'models/replay.mem'
    log_path: str = 'models/train_log.jsonl'


@dataclass
class BenchSettings:
    scene_count: int = 10
    trials: int = 5
    budgets: Dict[str, int] = field(default_factory=lambda: {
        'simple': 60, 'normal': 100, 'hard': 160, 'insane': 200})
    planners: List[str] = field(default_factory=lambda: ['random', 'fbe', 'greedy-nbv', 'nbp-oracle'])
    seed: int = 0
    threads: int = 1
    out_dir: str = 'results'
    scene_dir: Optional[str] = None
    eval_seed_offset: int = 1000  # сцены оценки не пересекаются с обучающими


SECTIONS = {
    'scene': SceneSettings,
    'sensor': SensorSettings,
    'window': WindowSettings,
    'coverage': CoverageSettings,
    'planner': PlannerSettings,
    'model': ModelSettings,
    'training': TrainingSettings,
    'bench': BenchSettings,
}


def _positive(value) -> bool:
    return value > 0


def _non_negative(value) -> bool:
    return value >= 0


def _fraction(value) -> bool:
    return 0 <= value <= 1


def _pair(value) -> bool:
    return isinstance(value, (list, tuple)) and len(value) == 2 and value[0] <= value[1]


# Правила проверки: (секция, ключ) -> (проверка, сообщение)
RULES: Dict[tuple, tuple] = {
    ('scene', 'difficulty'): (lambda v: v in DIFFICULTIES, f"должен быть одним из {DIFFICULTIES}"),
    ('scene', 'cell_size'): (_positive, "должен быть > 0"),
    ('scene', 'wall_height'): (_positive, "должен быть > 0"),
    ('scene', 'agent_height'): (_positive, "должен быть > 0"),
    ('scene', 'grid_size'): (lambda v: isinstance(v, list) and len(v) == 2 and min(v) >= 3,
                             "должен быть парой целых >= 3"),
    ('scene', 'room_count_range'): (lambda v: _pair(v) and v[0] >= 1, "должен быть парой [min, max], min >= 1"),
    ('scene', 'room_size_range'): (_pair, "должен быть парой [min, max]"),
    ('scene', 'corridor_width'): (_positive, "должен быть > 0"),
    ('scene', 'door_width'): (_positive, "должен быть > 0"),
    ('scene', 'window_fraction'): (_fraction, "должен быть от 0 до 1"),
    ('scene', 'branching_factor'): (_non_negative, "не может быть отрицательным"),
    ('scene', 'max_retries'): (_positive, "должен быть > 0"),
    ('sensor', 'width'): (_positive, "должен быть > 0"),
    ('sensor', 'height'): (_positive, "должен быть > 0"),
    ('sensor', 'hfov'): (lambda v: 0 < v < 180, "должен быть в (0, 180)"),
    ('sensor', 'depth_noise_std'): (_non_negative, "не может быть отрицательным"),
    ('sensor', 'interp_frames'): (_non_negative, "не может быть отрицательным"),
    ('window', 'extent'): (_positive, "должен быть > 0"),
    ('window', 'slices'): (lambda v: v >= 1, "должен быть >= 1"),
    ('window', 'density_scale'): (_positive, "должен быть > 0"),
    ('coverage', 'epsilon'): (lambda v: v is None or v > 0, "должен быть > 0"),
    ('coverage', 'comp_threshold'): (_positive, "должен быть > 0"),
    ('coverage', 'comp_cap'): (_positive, "должен быть > 0"),
    ('planner', 'beta'): (_positive, "должен быть > 0"),
    ('planner', 'obstacle_threshold'): (_fraction, "должен быть от 0 до 1"),
    ('planner', 'goal_retries'): (_non_negative, "не может быть отрицательным"),
    ('planner', 'greedy_radius'): (_non_negative, "не может быть отрицательным"),
    ('planner', 'oracle_stride'): (lambda v: v >= 1, "должен быть >= 1"),
    ('model', 'channels'): (lambda v: isinstance(v, list) and len(v) == 3 and min(v) >= 1,
                            "должен быть списком из трех ширин"),
    ('training', 'iterations'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'easy_iterations'): (_non_negative, "не может быть отрицательным"),
    ('training', 'trajectories_first'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'trajectories_rest'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'rollout_length'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'epochs'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'batch_size'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'accumulation_steps'): (lambda v: v >= 1, "должен быть >= 1"),
    ('training', 'learning_rate'): (_positive, "должен быть > 0"),
    ('training', 'momentum'): (lambda v: 0 <= v < 1, "должен быть в [0, 1)"),
    ('training', 'lr_decay'): (lambda v: 0 < v <= 1, "должен быть в (0, 1]"),
    ('training', 'holdout_size'): (_non_negative, "не может быть отрицательным"),
    ('training', 'gain_scale'): (lambda v: v is None or v > 0, "должен быть > 0"),
    ('training', 'task_mode'): (lambda v: v in TASK_MODES, f"должен быть одним из {TASK_MODES}"),
    ('training', 'train_scenes'): (lambda v: v >= 1, "должен быть >= 1"),
    ('bench', 'scene_count'): (lambda v: v >= 1, "должен быть >= 1"),
    ('bench', 'trials'): (lambda v: v >= 1, "должен быть >= 1"),
    ('bench', 'budgets'): (lambda v: isinstance(v, dict) and all(int(b) >= 0 for b in v.values()),
                           "должен быть словарем сложность -> бюджет"),
    ('bench', 'planners'): (lambda v: isinstance(v, list) and v and all(p in PLANNERS for p in v),
                            f"должен быть списком из {PLANNERS}"),
    ('bench', 'threads'): (lambda v: v >= 1, "должен быть >= 1"),
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class Config:
    def __init__(self, config_path: str = "config.yaml", strict: bool = False):
        self.logger = get_logger()
        self.config_path = Path(config_path)
        self.strict = strict
        self.scene = SceneSettings()
        self.sensor = SensorSettings()
        self.window = WindowSettings()
        self.coverage = CoverageSettings()
        self.planner = PlannerSettings()
        self.model = ModelSettings()
        self.training = TrainingSettings()
        self.bench = BenchSettings()
        self._load_config()

    def _problem(self, message: str):
        """В строгом режиме: ошибка, иначе предупреждение и значение по умолчанию"""
        if self.strict:
            raise ConfigError(message)
        self.logger.warning(f"⚠️  {message}")

    def _read_yaml(self, path: Path, seen: Set[Path]) -> Dict[str, Any]:
        path = path.resolve()
        if path in seen:
            raise ConfigError(f"циклический include: {path}")
        seen = seen | {path}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"ошибка разбора YAML в {path}: {e}")
        except OSError as e:
            raise ConfigError(f"не удалось прочитать {path}: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"корень {path} должен быть словарем")

        includes = data.pop('include', []) or []
        if isinstance(includes, str):
            includes = [includes]
        merged: Dict[str, Any] = {}
        for include in includes:
            merged = _deep_merge(merged, self._read_yaml(path.parent / str(include), seen))
        return _deep_merge(merged, data)

    def _load_config(self):
        if not self.config_path.exists():
            if self.strict:
                raise ConfigError(f"конфигурационный файл не найден: {self.config_path}")
            self._create_default_config()
            return

        try:
            config_data = self._read_yaml(self.config_path, set())
        except ConfigError as e:
            if self.strict:
                raise
            self.logger.error(f"❌ Ошибка загрузки конфигурации: {e}")
            return

        for section_name, section_data in config_data.items():
            if section_name not in SECTIONS:
                self._problem(f"неизвестная секция '{section_name}'")
                continue
            if not isinstance(section_data, dict):
                self._problem(f"секция '{section_name}' должна быть словарем")
                continue
            self._load_section(section_name, section_data)

        self.logger.info(f"✅ Конфигурация загружена из {self.config_path}")

    def _load_section(self, section_name: str, section_data: Dict[str, Any]):
        settings = getattr(self, section_name)
        known = {f.name: f for f in fields(settings)}
        for key, raw in section_data.items():
            if key not in known:
                self._problem(f"неизвестный ключ '{section_name}.{key}'")
                continue
            default = getattr(settings, key)
            try:
                value = self._cast(raw, default)
                check, message = RULES.get((section_name, key), (lambda v: True, ""))
                if not check(value):
                    raise ValueError(message)
            except (ValueError, TypeError) as e:
                self._problem(f"неверное значение {section_name}.{key}={raw!r}: {e}")
                continue
            setattr(settings, key, value)

    @staticmethod
    def _cast(raw: Any, default: Any) -> Any:
        if raw is None:
            return None
        if isinstance(default, bool):
            if not isinstance(raw, bool):
                raise TypeError("ожидается true/false")
            return raw
        if isinstance(default, int):
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise TypeError("ожидается целое число")
            return int(raw)
        if isinstance(default, float) or default is None and isinstance(raw, (int, float)):
            if isinstance(raw, bool):
                raise TypeError("ожидается число")
            return float(raw)
        if isinstance(default, str):
            return str(raw)
        if isinstance(default, list):
            if not isinstance(raw, list):
                raise TypeError("ожидается список")
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                cast = type(default[0])
                return [cast(item) for item in raw]
            return list(raw)
        if isinstance(default, dict):
            if not isinstance(raw, dict):
                raise TypeError("ожидается словарь")
            return {str(k): int(v) for k, v in raw.items()}
        return raw

    def _create_default_config(self):
        default_config = {name: asdict(getattr(self, name)) for name in SECTIONS}
        try:
            with open(self.config_path, 'w', encoding='utf-8') as f:
                yaml.dump(default_config, f, allow_unicode=True, default_flow_style=False, sort_keys=False)
            self.logger.info(f"📝 Создан конфигурационный файл: {self.config_path}")
        except OSError as e:
            self.logger.error(f"❌ Ошибка создания конфигурационного файла: {e}")

    # --- преобразование секций в доменные объекты ---

    def difficulty_params(self, seed: Optional[int] = None):
        from worldgen import DifficultyParams
        s = self.scene
        return DifficultyParams(
            room_count_range=(s.room_count_range[0], s.room_count_range[1]),
            room_size_range=(s.room_size_range[0], s.room_size_range[1]),
            corridor_width=s.corridor_width,
            door_width=s.door_width,
            window_fraction=s.window_fraction,
            branching_factor=s.branching_factor,
            seed=s.seed if seed is None else seed,
            grid_size=(s.grid_size[0], s.grid_size[1]),
            cell_size=s.cell_size,
            wall_height=s.wall_height,
            agent_height=s.agent_height,
            max_retries=s.max_retries,
        )

    def camera_model(self):
        from sensor import CameraModel
        return CameraModel(width=self.sensor.width, height=self.sensor.height, hfov=self.sensor.hfov)

    def window_spec(self, extent: Optional[float] = None):
        from geometry import WindowSpec
        extent = self.window.extent if extent is None else extent
        grid = int(round(extent / self.scene.cell_size))
        grid += grid % 2
        # окно всегда в клетках сцены: протяженность подгоняется под четную сетку
        return WindowSpec(extent=grid * self.scene.cell_size, grid=grid, slices=self.window.slices,
                          y_min=0.0, y_max=self.scene.wall_height)

    def coverage_config(self):
        from coverage import CoverageConfig
        epsilon = self.coverage.epsilon if self.coverage.epsilon is not None else self.scene.cell_size
        return CoverageConfig(epsilon=epsilon, comp_threshold=self.coverage.comp_threshold,
                              comp_cap=self.coverage.comp_cap)

    def budget(self, difficulty: Optional[str] = None) -> int:
        difficulty = difficulty or self.scene.difficulty
        return int(self.bench.budgets.get(difficulty, 100))


_config_instance: Optional[Config] = None


def get_config() -> Config:
    global _config_instance
    if _config_instance is None:
        _config_instance = Config()
    return _config_instance


def set_config(config: Config) -> Config:
    """Подменяет синглтон (CLI загружает конфиг из --config)"""
    global _config_instance
    _config_instance = config
    return config
