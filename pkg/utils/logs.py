"""
Root logger setup shared by the bench harness and the gateway.
"""

import logging
import os
import time
from typing import Optional

NOISY_LOGGERS = ("aiohttp.access", "asyncio", "urllib3")


def setup_logging(log_level: str = "INFO", log_dir: Optional[str] = "logs", prefix: str = "amvl") -> Optional[str]:
    """
    Replace any pre-existing root handlers with a timestamped file handler and a console handler.

    Returns:
        Path of the log file, or None when ``log_dir`` is None
    """
    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
    root.setLevel(getattr(logging, str(log_level).upper(), logging.INFO))

    log_file = None
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f"{prefix}_{time.strftime('%Y%m%d_%H%M%S')}.log")
        file_fmt = "%(asctime)s - %(module)s:%(lineno)d - %(name)s - %(levelname)s - %(message)s"
        fh = logging.FileHandler(log_file)
        fh.setFormatter(logging.Formatter(file_fmt))
        root.addHandler(fh)

    console_fmt = "%(asctime)s - %(module)s:%(lineno)d - %(levelname)s - %(message)s"
    ch = logging.StreamHandler()
    ch.setFormatter(logging.Formatter(console_fmt))
    root.addHandler(ch)

    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    if log_file:
        logging.getLogger(__name__).info(f"Logging to {log_file}")
    return log_file
