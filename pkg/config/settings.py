from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    # Runtime Settings
    NUM_WORKERS: int = 2
    TORCH_THREADS: Optional[int] = None

    # Logging Settings
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(levelname)s - %(message)s"

    # Backbone Settings
    BACKBONE_SOURCE: str = "random"
    BACKBONE_SEED: int = 0

    # Output Settings
    RUNS_DIR: str = "runs"
    ATTN_GRID_COLUMNS: int = 8

    class Config:
        env_file = ".env"
        env_prefix = "MDA_"
        case_sensitive = True


settings = Settings()
