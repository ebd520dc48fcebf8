import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Optional

from dotenv import load_dotenv

from bayhem.errors import InvalidArgumentError
from bayhem.multilevel import FitSettings

logger = logging.getLogger(__name__)

load_dotenv()

ENV_OUTPUT_DIR = "BAYHEM_OUTPUT_DIR"
ENV_LOG_LEVEL = "BAYHEM_LOG_LEVEL"

# Effective-config defaults; None means "use the experiment's own value".
DEFAULTS: Dict[str, Any] = {
    # Emulator
    "method": "bayhem",
    "mode": "shared",
    "objective": "joint",
    "rho": "fixed:1.0",
    "mean": "constant",
    "jitter": 1e-8,
    "links": "estimate",
    "level_trend": "constant",
    "link_nugget": 1e-4,
    # Optimizer
    "n_starts": 10,
    "max_iter": 400,
    "optimizer_seed": 0,
    # Benchmark
    "seed": None,
    "replicates": None,
    "rmse": None,
    "jobs": 1,
    # Surface
    "resolution": 50,
}

# Keys that describe the emulator and can override an experiment's settings.
SETTINGS_KEYS = (
    "mode",
    "objective",
    "rho",
    "mean",
    "jitter",
    "links",
    "level_trend",
    "link_nugget",
    "n_starts",
    "max_iter",
    "optimizer_seed",
)

# Keys left out of the config hash.
RESULT_NEUTRAL_KEYS = frozenset({"out", "jobs"})


def default_output_dir() -> Path:
    return Path(os.getenv(ENV_OUTPUT_DIR, "outputs"))


def default_log_level() -> str:
    return os.getenv(ENV_LOG_LEVEL, "INFO")


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Read a JSON config file of flag values (keys as in ``DEFAULTS``, dashes allowed).

    Raises:
        InvalidArgumentError: If the file is missing, not JSON, or not an object.
    """
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            values = json.load(f)
    except FileNotFoundError:
        raise InvalidArgumentError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(values, dict):
        raise InvalidArgumentError(f"{path}: config file must hold a JSON object")
    return {str(k).replace("-", "_"): v for k, v in values.items()}


def config_hash(config: Dict[str, Any]) -> str:
    """First 16 hex characters of the SHA-256 of the canonical JSON form."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RunConfig:
    """
    Effective configuration of one command.

    ``explicit`` names the keys set by the config file or a flag rather than
    taken from ``DEFAULTS``.
    """

    command: str
    values: Dict[str, Any]
    explicit: FrozenSet[str] = field(default_factory=frozenset)

    def get(self, key: str, default: Any = None) -> Any:
        value = self.values.get(key)
        return default if value is None else value

    def fit_settings(self) -> FitSettings:
        return FitSettings.from_dict(self.values)

    def settings_overrides(self) -> Dict[str, Any]:
        return {k: self.values[k] for k in SETTINGS_KEYS if k in self.explicit}

    def to_dict(self) -> Dict[str, Any]:
        """Values that affect results; the output location and worker count are left out."""
        return {"command": self.command, **{k: v for k, v in self.values.items() if k not in RESULT_NEUTRAL_KEYS}}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def resolve_run_config(command: str, args: Dict[str, Any], file_values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, then config-file values, then flags that were given."""
    file_values = file_values or {}
    given = {k: v for k, v in args.items() if v is not None}
    values = {**DEFAULTS, **file_values, **given}
    explicit = frozenset(file_values) | frozenset(given)
    # Validate emulator options early so bad values fail as argument errors.
    try:
        FitSettings.from_dict(values)
    except (ValueError, TypeError) as e:
        raise InvalidArgumentError(f"invalid option: {e}") from e
    logger.debug(f"Effective {command} config: {values}")
    return RunConfig(command=command, values=values, explicit=explicit)


def output_path(name: str, out: Optional[str] = None) -> Path:
    """``out`` if given, otherwise ``name`` inside the default output directory; parents are created."""
    path = Path(out) if out else default_output_dir() / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
