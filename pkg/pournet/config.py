"""Configuration management using Pydantic Settings."""

import sys

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    # Logging configuration
    LOG_LEVEL: str = "INFO"

    # Worker threads for atlas scans, prior generation and phantom generation
    POUR_WORKERS: int = 1

    # Number of decoded volumes kept in the in-memory LRU cache
    VOLUME_CACHE_SIZE: int = 256

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
    )


# Global settings instance
try:
    settings = Settings()
except Exception as exc:
    print("=" * 60, file=sys.stderr)
    print("ERROR: Configuration validation failed!", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    print(f"\n{exc}", file=sys.stderr)
    print("\nCheck LOG_LEVEL, POUR_WORKERS and VOLUME_CACHE_SIZE in your .env", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    sys.exit(2)
