"""Logging setup driven by BENTOFRAME_LOG."""

import logging
from typing import Optional

from app.core.config import settings

LOG_FORMAT = "%(levelname)s %(asctime)s - %(name)s - %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """
    Install a single stream handler on the root logger.

    Args:
        level: Level name; falls back to settings.LOG
    """
    name = (level or settings.LOG).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.INFO

    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_bentoframe", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._bentoframe = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(numeric)
