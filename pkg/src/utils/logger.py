import json
import logging
import logging.handlers
import sys
import time
from datetime import datetime
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Optional

import colorama
from colorama import Back, Fore, Style


colorama.init()

# Attributes present on every LogRecord; anything else came in through `extra`
_RECORD_FIELDS = {
    'name', 'msg', 'args', 'created', 'filename', 'funcName', 'levelname',
    'levelno', 'lineno', 'module', 'msecs', 'pathname', 'process',
    'processName', 'relativeCreated', 'thread', 'threadName', 'exc_info',
    'exc_text', 'stack_info', 'taskName', 'message', 'asctime',
}


class ColoredFormatter(logging.Formatter):
    """Formatter with coloured level names for console output"""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.RED + Back.WHITE
    }

    def __init__(self, fmt: Optional[str] = None, datefmt: Optional[str] = None,
                 use_color: bool = True):
        super().__init__(fmt, datefmt)
        self.use_color = use_color

    def format(self, record):
        levelname = record.levelname
        if self.use_color and levelname in self.COLORS:
            record.levelname = f"{self.COLORS[levelname]}{levelname}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            # handlers share the record; keep the file formatters clean
            record.levelname = levelname


class StructuredFormatter(logging.Formatter):
    """JSON-lines formatter for structured logs"""

    def format(self, record):
        log_data = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        for key, value in record.__dict__.items():
            if key not in _RECORD_FIELDS:
                log_data[key] = value

        if record.exc_info:
            log_data['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=str)


class LoggerSetup:
    """Centralized logger setup and management.

    Loggers always get a coloured console handler on standard error. File
    handlers (plain text, JSON lines and an aggregated error log) are added
    only after `initialize` has been called with a log directory.
    """

    _instance = None
    _loggers: Dict[str, logging.Logger] = {}
    _log_dir: Optional[Path] = None
    _console_level = logging.INFO
    _lock = Lock()

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(LoggerSetup, cls).__new__(cls)
        return cls._instance

    @classmethod
    def initialize(cls, log_dir: str = "log"):
        """Enable file logging under `log_dir`"""
        with cls._lock:
            cls._log_dir = Path(log_dir)
            cls._log_dir.mkdir(parents=True, exist_ok=True)
            (cls._log_dir / 'errors').mkdir(exist_ok=True)

            # Existing loggers pick up the file handlers too
            for name, logger in cls._loggers.items():
                cls._attach_file_handlers(logger, name)

    @classmethod
    def get_logger(cls, name: str) -> logging.Logger:
        """Get or create a logger instance"""
        with cls._lock:
            if name in cls._loggers:
                return cls._loggers[name]

            logger = logging.getLogger(name)
            logger.setLevel(logging.DEBUG)
            logger.propagate = False
            logger.handlers = []

            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(cls._console_level)
            console_handler.setFormatter(ColoredFormatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                datefmt='%H:%M:%S',
                use_color=sys.stderr.isatty()
            ))
            logger.addHandler(console_handler)

            if cls._log_dir:
                cls._attach_file_handlers(logger, name)

            cls._loggers[name] = logger
            return logger

    @classmethod
    def _attach_file_handlers(cls, logger: logging.Logger, name: str):
        if any(isinstance(h, logging.handlers.RotatingFileHandler) for h in logger.handlers):
            return

        log_file = cls._log_dir / f'{(name or "eopr").replace(".", "_")}.log'

        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5
        )
        file_handler.setLevel(logging.DEBUG)
        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
        )
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

        json_handler = logging.handlers.RotatingFileHandler(
            log_file.with_suffix('.json'),
            maxBytes=10 * 1024 * 1024,
            backupCount=5
        )
        json_handler.setLevel(logging.DEBUG)
        json_handler.setFormatter(StructuredFormatter())
        logger.addHandler(json_handler)

        error_handler = logging.handlers.RotatingFileHandler(
            cls._log_dir / 'errors' / 'all_errors.log',
            maxBytes=10 * 1024 * 1024,
            backupCount=5
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(file_formatter)
        logger.addHandler(error_handler)

    @classmethod
    def set_level(cls, verbose: bool = False, quiet: bool = False):
        """Adjust console verbosity for every known logger"""
        if verbose:
            level = logging.DEBUG
        elif quiet:
            level = logging.WARNING
        else:
            level = logging.INFO

        with cls._lock:
            cls._console_level = level
            for logger in cls._loggers.values():
                for handler in logger.handlers:
                    if type(handler) is logging.StreamHandler:
                        handler.setLevel(level)

    @classmethod
    def shutdown(cls):
        """Close file handlers and forget the log directory"""
        with cls._lock:
            for logger in cls._loggers.values():
                for handler in list(logger.handlers):
                    if isinstance(handler, logging.handlers.RotatingFileHandler):
                        handler.close()
                        logger.removeHandler(handler)
            cls._log_dir = None

    @classmethod
    def log_decision(cls, logger: logging.Logger, decision: str, **context: Any):
        """Log an automatic choice (selected lambda, fallback path, clamping)"""
        logger.info(
            f"Decision: {decision}",
            extra={'decision': decision, 'context': context}
        )


class LogContext:
    """Context manager for structured logging of a timed operation"""

    def __init__(self, logger: logging.Logger, operation: str, **kwargs):
        self.logger = logger
        self.operation = operation
        self.context = kwargs
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.debug(
            f"Starting: {self.operation}",
            extra={
                'operation': self.operation,
                'phase': 'start',
                **self.context
            }
        )
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        elapsed = time.perf_counter() - self.start_time

        if exc_type is None:
            self.logger.info(
                f"Completed: {self.operation} ({elapsed:.2f}s)",
                extra={
                    'operation': self.operation,
                    'phase': 'complete',
                    'elapsed_time': elapsed,
                    **self.context
                }
            )
        else:
            self.logger.error(
                f"Failed: {self.operation} ({elapsed:.2f}s) - {exc_val}",
                extra={
                    'operation': self.operation,
                    'phase': 'error',
                    'elapsed_time': elapsed,
                    'error_type': exc_type.__name__,
                    'error_message': str(exc_val),
                    **self.context
                }
            )
        return False
