import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Type, TypeVar

from pydantic import BaseModel, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from metastable.services.exceptions import ConfigError


class Settings(BaseSettings):
    """Runtime knobs only. Nothing here may change a numerical result."""
    LOG_LEVEL: str = "INFO"
    LOG_COLORS: bool = True
    WORKERS: int = 1
    OUTPUT_ROOT: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="METASTABLE_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator('LOG_LEVEL', mode='before')
    @classmethod
    def normalize_level(cls, v):
        level = str(v).strip().upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v!r}")
        return level

    @field_validator('WORKERS')
    @classmethod
    def positive_workers(cls, v):
        if v < 1:
            raise ValueError("WORKERS must be >= 1")
        return v


ModelT = TypeVar("ModelT", bound=BaseModel)


def canonical_json(payload: Dict[str, Any]) -> str:
    """Sorted keys, compact separators: the form hashed into every output file."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def payload_hash(payload: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON of a validated configuration."""
    return payload_hash(config.model_dump(mode="json"))


def parse_config(text: str, model: Type[ModelT], source: str = "<string>") -> ModelT:
    """
    Parse and validate a JSON configuration.

    Args:
        text: Raw JSON text
        model: Pydantic model to validate against
        source: Name used in diagnostics

    Returns:
        The validated model instance

    Raises:
        ConfigError: with line/column for syntax errors or the field path for validation errors
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")

    try:
        return model.model_validate(raw)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{source}: {details}")


def load_config(path: str, model: Type[ModelT]) -> ModelT:
    """Read a JSON file from disk and validate it against ``model``."""
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config(text, model, source=str(file_path))
