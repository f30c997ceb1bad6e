# featcal/config/settings.py
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from loguru import logger
from pydantic_settings import BaseSettings, SettingsConfigDict

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "featcal_config.yaml"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="FEATCAL_", extra="ignore")

    APP_NAME: str = "featcal"
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    ARTIFACT_DIR: str = "runs"
    CONFIG_PATH: str = str(DEFAULT_CONFIG_PATH)
    DEFAULT_SEED: int = 0

    def load_config(self, path: Optional[str] = None) -> Optional[Dict[str, Any]]:
        """Whole experiment config (YAML, or JSON which parses as YAML)."""
        path = path or self.CONFIG_PATH
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.error(f"Experiment config file '{path}' not found.")
            return None
        except yaml.YAMLError as e:
            logger.error(f"Error parsing experiment config {path}: {e}")
            return None
        if not isinstance(data, dict):
            logger.error(f"Experiment config {path} must be a mapping, got {type(data).__name__}")
            return None
        return data

    def load_section(self, name: str, path: Optional[str] = None) -> Optional[Dict[str, Any]]:
        data = self.load_config(path)
        if data is None:
            return None
        section = data.get(name)
        if section is None:
            logger.warning(f"Config section '{name}' not found in {path or self.CONFIG_PATH}.")
            return None
        logger.debug(f"Loaded config section '{name}': {section}")
        return section


settings = Settings()
