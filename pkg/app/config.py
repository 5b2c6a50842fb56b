from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="ICM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Logging
    log: str = "info"
    log_file: Optional[str] = None

    # Salidas
    output_dir: str = "./output"

    # Paralelismo
    threads: int = 1

    @property
    def log_level(self) -> str:
        level = self.log.strip().upper()
        if level not in {"ERROR", "INFO", "DEBUG"}:
            return "INFO"
        return level


settings = Settings()
