"""
Configuration module for fsm_placer.
Uses pydantic-settings to read runtime settings from the environment or a .env file.
"""

import os
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Runtime settings.
    Every field can be overridden by an environment variable prefixed with
    FSM_PLACER_, e.g. FSM_PLACER_THREADS=2.
    """

    # Parallelism cap for seed ensembles and sweep rows
    THREADS: Optional[int] = None

    # Logging
    LOG_LEVEL: str = "INFO"

    # Default artifact locations
    OUTPUT_DIR: Path = Path("runs")
    ERROR_LOG: Path = Path("error_log.txt")

    model_config = SettingsConfigDict(
        env_prefix="FSM_PLACER_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        case_sensitive=False,
    )

    @property
    def max_workers(self) -> int:
        """Number of worker threads to use, never below one."""
        if self.THREADS is not None:
            return max(1, self.THREADS)
        return min(8, os.cpu_count() or 1)


# Create a global instance of the settings
settings = Settings()
