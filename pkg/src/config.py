import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import ConfigError

# Load environment variables
load_dotenv()

# Base Directory
BASE_DIR = Path(__file__).parent.parent
DATA_DIR = BASE_DIR / "data"

# Bundled data files
DEFAULT_CONFIG_PATH = DATA_DIR / "default_config.json"
REGISTRY_GOLDEN_PATH = DATA_DIR / "registry_golden.json"
SIM_SETS_DIR = DATA_DIR / "sim_sets"
GATE_FIXTURES_PATH = DATA_DIR / "gate_fixtures.json"
REPLAY_CASSETTE_PATH = DATA_DIR / "replay_cassette.json"

# Logging
LOG_FILE = BASE_DIR / "gate_logs.json"

# LLM gate (chat-completions compatible endpoint, Groq by default)
LLM_MODEL_NAME = os.getenv("LLM_MODEL_NAME", "llama-3.3-70b-versatile")
LLM_BASE_URL = os.getenv("LLM_BASE_URL", "https://api.groq.com")
# Name of the variable that holds the credential; the key itself never lives in files
LLM_API_KEY_ENV = os.getenv("LLM_API_KEY_ENV", "GROQ_API_KEY")

# LangSmith Tracing Configuration
LANGCHAIN_TRACING_V2 = os.getenv("LANGCHAIN_TRACING_V2", "false").lower() == "true"
LANGCHAIN_API_KEY = os.getenv("LANGCHAIN_API_KEY")
LANGCHAIN_PROJECT = os.getenv("LANGCHAIN_PROJECT", "agentic-moe-netopt")
LANGCHAIN_ENDPOINT = os.getenv("LANGCHAIN_ENDPOINT", "https://api.smith.langchain.com")

# Output layout
DEFAULT_OUTPUT_DIR = Path(os.getenv("MOE_OUTPUT_DIR", "runs"))
MODEL_SUBDIR = "models"
MODEL_FORMAT = "agentic-moe-expert"
MODEL_FORMAT_VERSION = 1


def enable_tracing() -> bool:
    """Exports the LangSmith variables when tracing is switched on in the environment."""
    if LANGCHAIN_TRACING_V2 and LANGCHAIN_API_KEY:
        os.environ["LANGCHAIN_TRACING_V2"] = "true"
        os.environ["LANGCHAIN_API_KEY"] = LANGCHAIN_API_KEY
        os.environ["LANGCHAIN_PROJECT"] = LANGCHAIN_PROJECT
        os.environ["LANGCHAIN_ENDPOINT"] = LANGCHAIN_ENDPOINT
        print("✅ LangSmith tracing enabled for the gate")
        return True
    print("ℹ️  LangSmith tracing disabled")
    return False


class UncertaintySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m_samples: int = Field(200, ge=1)
    # utility family -> "lower" | "upper"; overrides the sense-based tail rule
    tail_overrides: Dict[str, str] = Field(default_factory=dict)


class GateSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_url: str = LLM_BASE_URL
    model: str = LLM_MODEL_NAME
    api_key_env: str = LLM_API_KEY_ENV
    timeout_s: float = Field(30.0, gt=0)
    retries: int = Field(2, ge=0)
    append_state_summary: bool = False


class BenchSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    test_states: int = Field(256, ge=1)
    full_test_states: int = Field(4000, ge=1)
    # extra equal-split alternatives for exhaustive search, e.g. [0.1, 0.2, ..., 0.9]
    weight_grid: List[float] = Field(default_factory=list)
    workers: Optional[int] = Field(None, ge=1)


class Settings(BaseModel):
    """Everything read from one JSON config tree."""

    model_config = ConfigDict(extra="forbid")

    system: Any = None
    uncertainty: UncertaintySettings = Field(default_factory=UncertaintySettings)
    training: Dict[str, Any] = Field(default_factory=dict)
    gate: GateSettings = Field(default_factory=GateSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)


def read_config_tree(path: Optional[Path] = None) -> Dict[str, Any]:
    """Reads the raw JSON tree, defaulting to the bundled reference configuration."""
    path = Path(path) if path else DEFAULT_CONFIG_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            tree = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(tree, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return tree


def load_settings(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """
    Loads and validates the config tree.

    The `system` section becomes a SystemConfig (dBm/dB keys converted) and
    `training` a TrainConfig; both are validated here so a bad file fails early.
    """
    # Imported here: netmodel and experts do not depend on this module
    from src.experts import TrainConfig
    from src.netmodel import SystemConfig

    tree = read_config_tree(path)
    for section, values in (overrides or {}).items():
        tree.setdefault(section, {}).update(values)

    try:
        settings = Settings.model_validate(tree)
        settings.system = SystemConfig.model_validate(tree.get("system") or {})
        settings.training = TrainConfig.model_validate(tree.get("training") or {}).model_dump()
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    return settings
