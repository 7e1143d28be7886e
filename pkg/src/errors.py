"""
Исключения лаборатории активного 3D-картирования
"""
from typing import Optional


class NBPLabError(Exception):
    """Базовое исключение проекта"""


class ConfigError(NBPLabError, ValueError):
    """Неверная конфигурация (строгий режим)"""


class SceneGenerationError(NBPLabError):
    """Не удалось разместить комнаты за отведенное число попыток"""

    def __init__(self, seed: int, message: str = ""):
        self.seed = seed
        super().__init__(message or f"не удалось сгенерировать сцену (seed={seed}), попробуйте seed={seed + 1}")


class SceneFormatError(NBPLabError, ValueError):
    """Поврежденный или несовместимый файл сцены"""


class PoseError(NBPLabError, ValueError):
    """Поза агента вне проходимой области или вне окна"""


class CoverageError(NBPLabError, ValueError):
    """Неверные входные данные для метрик покрытия"""


class PlanningError(NBPLabError, ValueError):
    """Неверные входные данные планировщика"""


class ShapeMismatchError(NBPLabError, ValueError):
    """Размеры входа не совпадают с конфигурацией модели"""


class TrainingDivergedError(NBPLabError):
    """Функция потерь стала не конечной"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        super().__init__(message)


class CheckpointError(NBPLabError):
    """Ошибка чтения/записи чекпоинта или файла памяти"""
