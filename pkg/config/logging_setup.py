import logging
from typing import Optional

import torch

from config.settings import settings


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for CLI and training runs"""
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=settings.LOG_FORMAT,
        force=True,
    )
    if settings.TORCH_THREADS:
        torch.set_num_threads(settings.TORCH_THREADS)
