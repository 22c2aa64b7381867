import logging
import os
import sys

from dotenv import load_dotenv
from pydantic_settings import BaseSettings

from src.core.logger import get_logger, set_default_config, set_global_context

# Basic logger for this config module only
_config_logger = logging.getLogger(__name__)

try:
    load_dotenv()
except Exception as e:
    _config_logger.warning(f"Could not load .env file, using process environment only. Error: {e}")


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


class Config(BaseSettings):
    APP_NAME: str = os.getenv("APP_NAME", "sensor-select")
    VERSION: str = os.getenv("VERSION", "0.1.0")
    ENV: str = os.getenv("ENV", "dev")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIRECTORY: str = os.getenv("LOG_DIRECTORY", "logs")
    LOG_FILE_NAME: str = os.getenv("LOG_FILE_NAME", "sensor_select.log")
    LOG_COLOR: bool = _flag("LOG_COLOR", "True")
    LOG_ENABLE_CONSOLE: bool = _flag("LOG_ENABLE_CONSOLE", "True")
    LOG_ENABLE_FILE: bool = _flag("LOG_ENABLE_FILE", "True")
    LOG_MAX_FILE_SIZE: int = int(os.getenv("LOG_MAX_FILE_SIZE", "10485760"))  # 10MB default
    LOG_BACKUP_COUNT: int = int(os.getenv("LOG_BACKUP_COUNT", "5"))
    LOG_ASYNC_WORKERS: int = int(os.getenv("LOG_ASYNC_WORKERS", "0"))

    BASE_URL: str = os.getenv("BASE_URL", "/api/v1")
    HOST: str = os.getenv("HOST", "0.0.0.0")
    PORT: int = int(os.getenv("PORT", "3210"))

    # Cholesky jitter ladder for M(S,S): start, multiply, give up past max
    MMSE_JITTER_START: float = float(os.getenv("MMSE_JITTER_START", "1e-10"))
    MMSE_JITTER_MAX: float = float(os.getenv("MMSE_JITTER_MAX", "1e-6"))
    MMSE_JITTER_FACTOR: float = float(os.getenv("MMSE_JITTER_FACTOR", "10"))

    ENUMERATION_CAP: int = int(os.getenv("ENUMERATION_CAP", "30"))
    EXACT_GIBBS_CAP: int = int(os.getenv("EXACT_GIBBS_CAP", "22"))
    EXACT_TPM_CAP: int = int(os.getenv("EXACT_TPM_CAP", "12"))
    SLICE_ENUMERATION_LIMIT: int = int(os.getenv("SLICE_ENUMERATION_LIMIT", "1000000"))

    EM_MAX_ITERS: int = int(os.getenv("EM_MAX_ITERS", "500"))
    EM_TOL: float = float(os.getenv("EM_TOL", "1e-8"))

    DEFAULT_THREADS: int = int(os.getenv("DEFAULT_THREADS", "1"))
    OUTPUT_DIRECTORY: str = os.getenv("OUTPUT_DIRECTORY", "out")

    def __str__(self):
        return (
            f"Config("
            f"APP_NAME={self.APP_NAME!r}, "
            f"VERSION={self.VERSION!r}, "
            f"ENV={self.ENV!r}, "
            f"LOG_LEVEL={self.LOG_LEVEL!r}, "
            f"BASE_URL={self.BASE_URL!r}, "
            f"ENUMERATION_CAP={self.ENUMERATION_CAP}, "
            f"EXACT_GIBBS_CAP={self.EXACT_GIBBS_CAP}, "
            f"EXACT_TPM_CAP={self.EXACT_TPM_CAP}, "
            f"MMSE_JITTER=[{self.MMSE_JITTER_START:g}, {self.MMSE_JITTER_MAX:g}]"
            f")"
        )

    def __repr__(self):
        return self.__str__()


def get_config() -> Config:
    return Config()


settings = get_config()
# Set default configuration for all logger instances
try:
    set_default_config(
        log_level=settings.LOG_LEVEL,
        log_directory=settings.LOG_DIRECTORY,
        log_filename=settings.LOG_FILE_NAME,
        use_colors=settings.LOG_COLOR,
        enable_console=settings.LOG_ENABLE_CONSOLE,
        enable_file=settings.LOG_ENABLE_FILE,
        max_file_size=settings.LOG_MAX_FILE_SIZE,
        backup_count=settings.LOG_BACKUP_COUNT,
        async_workers=settings.LOG_ASYNC_WORKERS,
    )

    # Available in every log line
    set_global_context(
        app_name=settings.APP_NAME,
        version=settings.VERSION,
        environment=settings.ENV,
    )

    logger = get_logger(name=__name__)
    logger.debug(f"Logger configured for {settings.APP_NAME} v{settings.VERSION}, level {settings.LOG_LEVEL}")
    logger.debug(f"Log Directory: {settings.LOG_DIRECTORY}, Log File: {settings.LOG_FILE_NAME}")

except Exception as e:
    _config_logger.error(f"Failed to configure custom logger: {e}")
    _config_logger.error("Falling back to basic logging")
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format='[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    logger = logging.getLogger("sensor_select")
