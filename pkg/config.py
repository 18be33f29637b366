from __future__ import annotations

import logging
import os
from pathlib import Path

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Config(BaseSettings):
    """Runtime settings loaded from environment variables (and an optional .env file).

    These only affect parallelism, paths and verbosity; numerical results of an experiment
    are fully determined by its experiment config file and seed.
    """

    # Parallelism
    GOT_THREADS: int = Field(
        default=0,
        ge=0,
        le=1024,
        description="Upper bound on worker threads for cost assembly and Dijkstra runs (0 = all cores).",
    )

    # Output
    GOT_OUTPUT_DIR: str = Field(
        default="./runs",
        description="Default root directory for experiment outputs when --out is not given.",
    )

    GOT_LOG_LEVEL: str = Field(default="WARNING", description="Logging level name for the CLI.")

    # Solver defaults
    GOT_PD_MAX_ITER: int = Field(default=20000, ge=1, description="Primal-dual iteration budget.")
    GOT_PD_TOL: float = Field(default=1e-5, gt=0, description="Primal-dual KKT residual tolerance.")
    GOT_OT_MAX_ITER: int = Field(default=1_000_000, ge=1, description="Network simplex iteration cap.")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    @field_validator("GOT_LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.strip().upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"GOT_LOG_LEVEL must be a logging level name, got {v!r}")
        return level

    @field_validator("GOT_OUTPUT_DIR")
    @classmethod
    def normalize_output_dir(cls, v: str) -> str:
        """
        Normalize GOT_OUTPUT_DIR to an absolute path.

        Relative paths are resolved from the project root (where config.py lives),
        not from the current working directory.

        Examples:
            - "./runs" → "<project>/runs"
            - "~/got-runs" → "/home/me/got-runs"
        """
        path = Path(v).expanduser()
        if not path.is_absolute():
            path = (Path(__file__).parent / path).resolve()
        else:
            path = path.resolve()
        return str(path)

    @property
    def output_path(self) -> Path:
        return Path(self.GOT_OUTPUT_DIR)

    @property
    def max_workers(self) -> int:
        if self.GOT_THREADS > 0:
            return self.GOT_THREADS
        return os.cpu_count() or 1


# Eagerly load configuration at import time for convenience across modules
config = Config()
