"""Process-level settings using Pydantic settings."""

from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings with environment variable support.

    Experiment parameters live in ``RunConfig``; these only shape how a
    process runs (logging, default paths, threading).
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="DIFFPROMPT_",
        case_sensitive=True,
        extra="ignore",
    )

    # Environment
    ENVIRONMENT: str = Field(
        default="development",
        description="Environment (development, production)"
    )

    # Logging
    LOG_LEVEL: Optional[str] = Field(
        default=None,
        description="Log level override (DEBUG, INFO, WARNING, ERROR)"
    )

    LOG_JSON: Optional[bool] = Field(
        default=None,
        description="Force JSON (true) or pretty (false) log lines"
    )

    # Runs
    OUT_DIR: str = Field(
        default="runs/default",
        description="Default output directory for data, checkpoints and reports"
    )

    DEVICE: str = Field(
        default="cpu",
        description="Torch device; CPU is the supported contract"
    )

    NUM_THREADS: int = Field(
        default=0,
        ge=0,
        description="Torch intra-op threads (0 keeps the library default)"
    )

    PROGRESS_BARS: bool = Field(
        default=False,
        description="Show tqdm progress bars in long loops"
    )

    @property
    def is_production(self) -> bool:
        """Whether logs should default to JSON lines."""
        return self.ENVIRONMENT == "production"


# Global settings instance
settings = Settings()
