from loguru import logger
import os
import sys

logger.remove()
_sink = logger.add(
    sys.stderr,
    level=os.environ.get("BSTC_LOG_LEVEL", "INFO"),
    format="{elapsed} | <level>{level}</> | {message}",
)


def set_level(level: str):
    global _sink
    logger.remove(_sink)
    _sink = logger.add(
        sys.stderr, level=level, format="{elapsed} | <level>{level}</> | {message}"
    )
