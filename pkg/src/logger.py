import logging
from pathlib import Path
from datetime import datetime
from typing import Any, Optional

from tqdm import tqdm


class TqdmHandler(logging.StreamHandler):
    """Консольный вывод через tqdm.write: активный прогресс-бар не ломается"""

    def emit(self, record: logging.LogRecord):
        try:
            tqdm.write(self.format(record), file=self.stream)
            self.flush()
        except Exception:
            self.handleError(record)


class LabLogger:
    def __init__(self, log_dir: str = "logs"):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(exist_ok=True)

        # Имя файла с timestamp
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.log_file = self.log_dir / f"nbp_lab_{timestamp}.log"

        self._setup_logger()

    def _setup_logger(self):
        """Настраивает логгер"""
        self.logger = logging.getLogger('NBPLab')
        self.logger.setLevel(logging.INFO)

        formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        file_handler = logging.FileHandler(self.log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)

        console_handler = TqdmHandler()
        console_handler.setFormatter(formatter)

        # Повторная инициализация в том же процессе не должна дублировать вывод
        self.logger.handlers.clear()
        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

        self.logger.debug(f"Логгер инициализирован. Файл: {self.log_file}")

    def set_verbose(self, verbose: bool):
        self.logger.setLevel(logging.DEBUG if verbose else logging.INFO)

    def debug(self, message: str):
        self.logger.debug(message)

    def info(self, message: str):
        self.logger.info(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def error(self, message: str):
        self.logger.error(message)

    def start_session(self, title: str, **fields: Any):
        """Логирует начало сессии (эпизод, обучение, оценка)"""
        self.logger.info("=" * 50)
        self.logger.info(f"🚀 {title.upper()}")
        for key, value in fields.items():
            self.logger.info(f"   {key}: {value}")
        self.logger.info("=" * 50)

    def end_session(self, title: str, **fields: Any):
        """Логирует завершение сессии"""
        self.logger.info("=" * 50)
        self.logger.info(f"✅ {title.upper()} ЗАВЕРШЕНО")
        for key, value in fields.items():
            self.logger.info(f"📊 {key}: {value}")
        self.logger.info("=" * 50)


_logger_instance: Optional[LabLogger] = None


def get_logger() -> LabLogger:
    global _logger_instance
    if _logger_instance is None:
        _logger_instance = LabLogger()
    return _logger_instance
