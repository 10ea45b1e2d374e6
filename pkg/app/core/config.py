import os
from dotenv import load_dotenv

load_dotenv()


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


class Settings:
    # Worker processes for ablation sweeps
    XDDA_THREADS: int = _int_env("XDDA_THREADS", 1)

    # Logging; an empty log dir disables the file handlers
    XDDA_LOG_DIR: str = os.getenv("XDDA_LOG_DIR", "logs")
    XDDA_LOG_LEVEL: str = os.getenv("XDDA_LOG_LEVEL", "INFO").upper()

    # Default location of generated datasets
    XDDA_DATA_ROOT: str = os.getenv("XDDA_DATA_ROOT", "data")

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
