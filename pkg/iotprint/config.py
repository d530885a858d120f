from __future__ import annotations
from pathlib import Path
import os
import logging
import sys

from dotenv import load_dotenv


class Config:
    """
    Centralized configuration for the iotprint toolkit.
    Defines directory structure, fingerprint geometry, published-setup defaults, and runtime flags.
    """

    # --- Base Directories ---
    BASE_DIR = Path.cwd()
    DATA_DIR = BASE_DIR / "data"  # default root for command outputs
    LOG_DIR = BASE_DIR / "logs"  # pipeline runner logs

    # --- Fingerprint Geometry ---
    IMAGE_SIDE: int = 28
    INPUT_WIDTH: int = IMAGE_SIDE * IMAGE_SIDE  # 784 bytes per session

    # --- Labels ---
    UNMAPPED_LABEL: str = "unmapped"
    NON_IOT_LABEL: str = "Non-IoT devices"
    UNKNOWN_LABEL: str = "unknown"

    # --- Published Setup Defaults ---
    MIN_SESSIONS: int = 1000  # devices need strictly more sessions than this
    PUBLISHED_CLASS_COUNT: int = 10
    THRESHOLD_GRID_STEP: float = 0.01

    # --- Logging ---
    LOGGER_NAME: str = "iotprint"
    LOG_LEVEL: int = logging.INFO
    LOG_ENV_VAR: str = "IOTPRINT_LOG"

    # --- Runtime Stat Bar Behavior Flags ---
    TQDM_ENABLED: bool = True  # Display progress bars by default

    # --- Utility Methods ---

    @staticmethod
    def ensure_dirs() -> None:
        """Create required directories if they don't already exist."""
        Config.DATA_DIR.mkdir(parents=True, exist_ok=True)
        Config.LOG_DIR.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls) -> None:
        """
        Load configuration overrides from a .env file and environment variables.
        IOTPRINT_LOG accepts a level name (DEBUG, INFO, ...) or a verbosity 0-3.
        """
        load_dotenv()
        tqdm_flag = os.getenv("TQDM_ENABLED")
        if tqdm_flag is not None:
            cls.TQDM_ENABLED = tqdm_flag.lower() in ("1", "true", "yes", "on")
        raw = os.getenv(cls.LOG_ENV_VAR)
        if raw:
            cls.set_log_level(cls.parse_log_level(raw))

    @staticmethod
    def parse_log_level(raw: str) -> int:
        """Map an IOTPRINT_LOG value onto a logging level, defaulting to INFO."""
        value = raw.strip().upper()
        by_verbosity = {"0": logging.ERROR, "1": logging.WARNING, "2": logging.INFO, "3": logging.DEBUG}
        if value in by_verbosity:
            return by_verbosity[value]
        level = logging.getLevelName(value)
        return level if isinstance(level, int) else logging.INFO

    @classmethod
    def set_log_level(cls, level: int) -> None:
        cls.LOG_LEVEL = level
        logging.getLogger(cls.LOGGER_NAME).setLevel(level)

    @classmethod
    def set_tqdm(cls, enabled: bool) -> None:
        """
        Manually enable/disable tqdm progress bars.
        Tests and batch runs switch them off to keep logs clean.
        """
        cls.TQDM_ENABLED = enabled

    @staticmethod
    def setup_logger(name: str, log_file: Path | None = None, level: int | None = None) -> logging.Logger:
        """
        Configures the package logger (console, plus an optional file) and
        returns the named child logger.
        """
        package_logger = logging.getLogger(Config.LOGGER_NAME)
        if level is not None:
            package_logger.setLevel(level)
        elif package_logger.level == logging.NOTSET:
            package_logger.setLevel(Config.LOG_LEVEL)

        formatter = logging.Formatter(
            "%(asctime)s [%(levelname)s] %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )

        # Prevent duplicate handlers if already configured
        if not any(type(h) is logging.StreamHandler for h in package_logger.handlers):
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setFormatter(formatter)
            package_logger.addHandler(console_handler)

        if log_file is not None:
            log_file = Path(log_file).resolve()
            known = {
                getattr(h, "baseFilename", None)
                for h in package_logger.handlers
                if isinstance(h, logging.FileHandler)
            }
            if str(log_file) not in known:
                log_file.parent.mkdir(parents=True, exist_ok=True)
                file_handler = logging.FileHandler(log_file, encoding="utf-8")
                file_handler.setFormatter(formatter)
                package_logger.addHandler(file_handler)

        return logging.getLogger(name)

    @staticmethod
    def close_log_files() -> None:
        """Detach file handlers added for a run so the next run starts clean."""
        package_logger = logging.getLogger(Config.LOGGER_NAME)
        for handler in list(package_logger.handlers):
            if isinstance(handler, logging.FileHandler):
                package_logger.removeHandler(handler)
                handler.close()
