"""
JSON structured logger setup
Logs go to stderr so report files stay reproducible
"""

from datetime import datetime, timezone
import json
import logging
import sys

EXTRA_FIELDS = (
    "command",
    "config_hash",
    "seed",
    "path_id",
    "n_paths",
    "workers",
    "elapsed",
    "error",
)

_BASE_FACTORY = logging.getLogRecordFactory()


class JSONFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging"""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "service": getattr(record, "service", "unknown"),
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        for field in EXTRA_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_entry, default=str)


def setup_logger(service_name, level=None, fmt=None):
    """Setup the root handler for the toolkit and return the service logger"""
    from config import LOG_FORMAT, LOG_LEVEL

    level = logging.getLevelName(level or LOG_LEVEL)
    fmt = fmt or LOG_FORMAT

    # Library modules log through logging.getLogger(__name__), so configure the root
    root = logging.getLogger()
    root.setLevel(level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    if fmt == "json":
        handler.setFormatter(JSONFormatter())
    else:
        handler.setFormatter(
            logging.Formatter(
                "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
    root.addHandler(handler)

    # Add service name to all log records
    old_factory = _BASE_FACTORY

    def record_factory(*args, **kwargs):
        record = old_factory(*args, **kwargs)
        record.service = service_name
        return record

    logging.setLogRecordFactory(record_factory)

    return logging.getLogger(service_name)
