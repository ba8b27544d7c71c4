"""Application configuration settings."""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings loaded from BENTOFRAME_* environment variables."""

    # Logging
    LOG: str = "INFO"

    # Storage geometry
    BLOCK_SIZE: int = 4096
    CACHE_CAPACITY: int = 1024
    JOURNAL_LEN: int = 256
    COMMIT_INTERVAL_MS: int = 10
    BLOCKS_PER_INODE: int = 4
    WRITE_CHUNK_BLOCKS: int = 16

    # Application
    ENVIRONMENT: str = "development"
    API_V1_PREFIX: str = "/api"
    PROJECT_NAME: str = "bentoframe"
    VERSION: str = "1.0.0"
    HOST: str = "127.0.0.1"
    PORT: int = 8000

    model_config = SettingsConfigDict(
        env_prefix="BENTOFRAME_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
