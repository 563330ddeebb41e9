from pydantic_settings import BaseSettings
from functools import lru_cache


class Settings(BaseSettings):
    # Output root for run directories (STYLEDIFF_RUN_DIR)
    run_dir: str = "runs"

    # Logging
    log_level: str = "INFO"

    # Seed used when a command is invoked without --seed
    default_seed: int = 0

    # Sweep process pool cap
    max_workers: int = 4

    # Motion file extension used by gen-data / generate / evaluate
    motion_suffix: str = ".motn"

    class Config:
        env_file = ".env"
        env_prefix = "STYLEDIFF_"
        extra = "allow"


@lru_cache()
def get_settings() -> Settings:
    return Settings()
