"""
Context-aware logger for solver runs.

One `Logger` per name (singleton). Console output goes to stderr so the CLI can
keep stdout for JSON results; a rotating file handler is optional. Context
variables (run_id, algorithm, seed, ...) are attached to every record.
"""

import inspect
import json
import logging
import logging.handlers
import re
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Union


class LogLevel(Enum):
    """Log level enumeration for type safety"""
    CRITICAL = logging.CRITICAL
    ERROR = logging.ERROR
    WARNING = logging.WARNING
    INFO = logging.INFO
    DEBUG = logging.DEBUG
    NOTSET = logging.NOTSET


class ColorCodes:
    """ANSI color codes for console output"""
    RESET = '\033[0m'
    BOLD = '\033[1m'
    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    CYAN = '\033[36m'
    BRIGHT_RED = '\033[91m'


_FIELD_PATTERN = re.compile(r'%\((\w+)\)s')


def _fill_context(record: logging.LogRecord, fmt: str) -> None:
    # Format fields missing from the record fall back to context, then ''
    context_data = LoggerContext.get_all_context()
    for field in _FIELD_PATTERN.findall(fmt):
        if not hasattr(record, field):
            setattr(record, field, context_data.get(field, ''))
    for key, value in context_data.items():
        if not hasattr(record, key):
            setattr(record, key, value)


class ColoredFormatter(logging.Formatter):
    """Console formatter; colors by level when stderr is a terminal"""

    LEVEL_COLORS = {
        logging.DEBUG: ColorCodes.CYAN,
        logging.INFO: ColorCodes.GREEN,
        logging.WARNING: ColorCodes.YELLOW,
        logging.ERROR: ColorCodes.RED,
        logging.CRITICAL: ColorCodes.BRIGHT_RED + ColorCodes.BOLD,
    }

    def __init__(self, fmt: str, datefmt: Optional[str] = None, use_colors: bool = True):
        super().__init__(fmt, datefmt)
        self.use_colors = use_colors
        self.fmt = fmt

    def format(self, record: logging.LogRecord) -> str:
        _fill_context(record, self.fmt)
        message = super().format(record)
        if self.use_colors and hasattr(sys.stderr, 'isatty') and sys.stderr.isatty():
            color = self.LEVEL_COLORS.get(record.levelno, '')
            return f"{color}{message}{ColorCodes.RESET}"
        return message


class SafeFormatter(logging.Formatter):
    """File formatter that tolerates missing context fields"""

    def format(self, record: logging.LogRecord) -> str:
        _fill_context(record, self._fmt or "")
        return super().format(record)


class LoggerContext:
    """Process-wide context variables attached to every record"""

    _context_vars: Dict[str, ContextVar] = {}
    _lock = threading.Lock()

    @classmethod
    def set_context(cls, key: str, value: Any) -> None:
        with cls._lock:
            if key not in cls._context_vars:
                cls._context_vars[key] = ContextVar(key, default='')
            cls._context_vars[key].set(str(value))

    @classmethod
    def get_context(cls, key: str) -> str:
        with cls._lock:
            if key in cls._context_vars:
                return cls._context_vars[key].get('')
            return ''

    @classmethod
    def get_all_context(cls) -> Dict[str, str]:
        with cls._lock:
            return {key: var.get('') for key, var in cls._context_vars.items()}


class AsyncLogHandler:
    """Thread-pool emitter; with zero workers records are emitted inline"""

    def __init__(self, max_workers: int = 0):
        self.executor = (
            ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="AsyncLogger")
            if max_workers > 0 else None
        )
        self._shutdown = False

    def emit(self, handler: logging.Handler, record: logging.LogRecord) -> None:
        if self._shutdown:
            return
        if self.executor is None:
            self._emit_sync(handler, record)
            return
        future = self.executor.submit(self._emit_sync, handler, record)
        future.add_done_callback(self._handle_emit_error)

    def _emit_sync(self, handler: logging.Handler, record: logging.LogRecord) -> None:
        try:
            if record.levelno >= handler.level:
                handler.emit(record)
        except Exception as e:
            print(f"Logger error: {e}", file=sys.stderr)

    def _handle_emit_error(self, future) -> None:
        try:
            future.result()
        except Exception as e:
            print(f"Async logging error: {e}", file=sys.stderr)

    def shutdown(self) -> None:
        self._shutdown = True
        if self.executor is not None:
            self.executor.shutdown(wait=True)


class Logger:
    """
    Named logger with context variables, optional async emission and
    rotating file output. Obtain instances through `get_logger`.
    """

    DEFAULT_FORMAT = "[%(asctime)s] [%(levelname)s | %(name)s] [%(funcName)s] [%(run_id)s] %(message)s"
    DEFAULT_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

    _instances: Dict[str, 'Logger'] = {}
    _default_config: Optional[Dict[str, Any]] = None
    _lock = threading.Lock()

    def __init__(
        self,
        name: str = "sensor_select",
        log_level: Union[str, int, LogLevel] = LogLevel.INFO,
        log_directory: str = "logs",
        log_filename: str = "sensor_select.log",
        log_format: str = DEFAULT_FORMAT,
        date_format: str = DEFAULT_DATE_FORMAT,
        use_colors: bool = True,
        max_file_size: int = 10 * 1024 * 1024,
        backup_count: int = 5,
        enable_console: bool = True,
        enable_file: bool = False,
        async_workers: int = 0
    ):
        self.name = name
        self.log_level = self._parse_log_level(log_level)
        self.log_directory = Path(log_directory)
        self.log_filename = log_filename
        self.log_format = log_format
        self.date_format = date_format
        self.use_colors = use_colors
        self.max_file_size = max_file_size
        self.backup_count = backup_count
        self.enable_console = enable_console
        self.enable_file = enable_file

        self.async_handler = AsyncLogHandler(max_workers=async_workers)
        self._logger = self._setup_logger()

    @classmethod
    def set_default_config(cls, **config) -> None:
        cls._default_config = config

    @classmethod
    def get_logger(cls, name: str = "sensor_select", **kwargs) -> 'Logger':
        """Singleton per name; kwargs override the default config on first creation"""
        with cls._lock:
            if name not in cls._instances:
                final_config = {}
                if cls._default_config:
                    final_config.update(cls._default_config)
                final_config.update(kwargs)
                final_config['name'] = name
                cls._instances[name] = cls(**final_config)
            return cls._instances[name]

    @staticmethod
    def _parse_log_level(level: Union[str, int, LogLevel]) -> int:
        if isinstance(level, LogLevel):
            return level.value
        if isinstance(level, str):
            return getattr(logging, level.upper(), logging.INFO)
        if isinstance(level, int):
            return level
        return logging.INFO

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(self.name)
        logger.setLevel(self.log_level)
        logger.propagate = False
        logger.handlers.clear()

        if self.enable_file:
            try:
                self.log_directory.mkdir(parents=True, exist_ok=True)
                file_handler = logging.handlers.RotatingFileHandler(
                    self.log_directory / self.log_filename,
                    maxBytes=self.max_file_size,
                    backupCount=self.backup_count,
                    encoding='utf-8'
                )
                file_handler.setLevel(self.log_level)
                file_handler.setFormatter(SafeFormatter(self.log_format, datefmt=self.date_format))
                logger.addHandler(file_handler)
            except Exception as e:
                print(f"Failed to setup file logging: {e}", file=sys.stderr)

        if self.enable_console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(self.log_level)
            console_handler.setFormatter(
                ColoredFormatter(self.log_format, datefmt=self.date_format, use_colors=self.use_colors)
            )
            logger.addHandler(console_handler)

        return logger

    def _log(self, level: int, msg: Any, exc_info: bool = False) -> None:
        if not self._logger.isEnabledFor(level):
            return
        # Two frames up: _log <- info/debug/... <- caller
        frame = inspect.currentframe()
        try:
            caller = frame.f_back.f_back if frame and frame.f_back else None  # type: ignore
            if caller is not None:
                filename, lineno, funcname = caller.f_code.co_filename, caller.f_lineno, caller.f_code.co_name
            else:
                filename, lineno, funcname = "(unknown file)", 0, "(unknown function)"
        finally:
            del frame

        record = self._logger.makeRecord(
            self._logger.name, level, filename, lineno, str(msg), (),
            sys.exc_info() if exc_info else None, func=funcname,
        )
        for key, value in LoggerContext.get_all_context().items():
            setattr(record, key, value)
        for handler in self._logger.handlers:
            self.async_handler.emit(handler, record)

    def set_level(self, level: Union[str, int, LogLevel]) -> None:
        self.log_level = self._parse_log_level(level)
        self._logger.setLevel(self.log_level)
        for handler in self._logger.handlers:
            handler.setLevel(self.log_level)

    def debug(self, message: Any) -> None:
        self._log(logging.DEBUG, message)

    def info(self, message: Any) -> None:
        self._log(logging.INFO, message)

    def warning(self, message: Any) -> None:
        self._log(logging.WARNING, message)

    def error(self, message: Any) -> None:
        self._log(logging.ERROR, message)

    def exception(self, message: Any) -> None:
        """Log at ERROR with the current traceback"""
        self._log(logging.ERROR, message, exc_info=True)

    def log_structured(self, level: Union[str, int, LogLevel], data: Dict[str, Any]) -> None:
        """Log an event dict as one JSON line"""
        self._log(self._parse_log_level(level), json.dumps(data, default=str, ensure_ascii=False))

    def shutdown(self) -> None:
        self.async_handler.shutdown()
        for handler in self._logger.handlers:
            try:
                handler.flush()
                handler.close()
            except Exception:
                pass


def get_logger(name: str = "sensor_select", **kwargs) -> Logger:
    return Logger.get_logger(name, **kwargs)


def set_default_config(**config) -> None:
    Logger.set_default_config(**config)


def set_global_context(**kwargs) -> None:
    for key, value in kwargs.items():
        LoggerContext.set_context(key, value)


def set_global_level(level: Union[str, int, LogLevel]) -> None:
    """Change the level of every existing logger and of those created later"""
    with Logger._lock:
        config = dict(Logger._default_config or {})
        config['log_level'] = level
        Logger._default_config = config
        instances = list(Logger._instances.values())
    for instance in instances:
        instance.set_level(level)


@contextmanager
def run_context(**kwargs) -> Iterator[None]:
    """Set context variables for the duration of a block, restoring the previous values after"""
    previous = {key: LoggerContext.get_context(key) for key in kwargs}
    set_global_context(**kwargs)
    try:
        yield
    finally:
        set_global_context(**previous)


def shutdown_logging() -> None:
    """Flush and close every logger instance"""
    for instance in list(Logger._instances.values()):
        instance.shutdown()
    Logger._instances.clear()
