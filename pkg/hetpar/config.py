"""Application configuration using Pydantic Settings."""

import logging

from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class Settings(BaseSettings):
    """Engine settings loaded from environment variables."""

    # Logging
    HETPAR_LOG: str = "info"  # error | info | debug

    # Collectives
    HETPAR_COMM_TIMEOUT: float = 30.0

    # Data loading
    HETPAR_PREFETCH_DEPTH: int = 2
    HETPAR_CACHE_BYTES: int = 64 * 1024 * 1024
    HETPAR_CACHE_BLOCK_BYTES: int = 1024 * 1024

    # Checkpointing
    HETPAR_CHECKPOINT_DIR: str = "checkpoints"

    # Parameter consistency check, in optimizer steps
    HETPAR_CONSISTENCY_INTERVAL: int = 100

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


def configure_logging(level: str = "info") -> None:
    """
    Configure root logging for the process.

    Args:
        level: One of error, info, debug

    Raises:
        ValueError: On an unknown level name
    """
    if level not in LOG_LEVELS:
        raise ValueError(f"Unknown log level {level!r}, expected one of {sorted(LOG_LEVELS)}")

    logging.basicConfig(
        level=LOG_LEVELS[level],
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        force=True,
    )


def debug_enabled() -> bool:
    """Whether the current process logs at debug level."""
    return logging.getLogger().isEnabledFor(logging.DEBUG)


# Global settings instance
settings = Settings()
