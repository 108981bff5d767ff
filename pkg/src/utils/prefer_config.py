#!/usr/bin/env python3
"""
PREFER Run Configuration
Loads the flat JSON manifest and merges command-line overrides

Precedence is command-line flag, then config file, then the defaults
below. The config digest covers only the fields that change training
results, so moving a log file or raising concurrency does not block a
resume.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from src.core.prefer_types import LabelSpace, PreferError

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / 'config' / 'prefer_manifest.json'

MODES = ('full', 'no_feedback', 'no_bagging', 'voting', 'single_prompt')
INFERENCE_MODES = ('weighted_vote', 'weighted_score')

# Fields left out of the digest: they never change what training produces.
NON_RESULT_FIELDS = frozenset({
    'n_jobs', 'max_in_flight', 'base_url', 'request_timeout_seconds', 'max_retries',
    'retry_initial_seconds', 'log_enabled', 'log_file_path', 'log_max_file_size_mb',
    'log_rotation_count', 'log_level', 'inference_mode', 'averaging',
})


class ConfigError(PreferError):
    """Bad configuration file, unknown key or invalid value."""


@dataclass(frozen=True)
class PreferConfig:
    """Every setting a run reads, with the defaults used when nothing overrides them."""

    # boosting
    k: int = 50
    iterations: int = 5
    m: int = 4
    num_feedbacks: int = 2
    eps: float = 1e-6
    seed: int = 0
    mode: str = 'full'
    # bagging
    tau: float = 1.0
    vote_n: int = 3
    # task
    labels: Tuple[str, ...] = ('Yes', 'No')
    positive_label: Optional[str] = None
    averaging: Optional[str] = None
    task_description: str = 'Textual Entailment'
    template_dir: Optional[str] = None
    solving_template: Optional[str] = None
    inference_mode: str = 'weighted_vote'
    # provider
    model: str = 'gpt-3.5-turbo'
    base_url: str = 'https://api.openai.com/v1'
    solve_temperature: float = 0.0
    feedback_temperature: float = 1.0
    vote_temperature: float = 1.0
    max_tokens: int = 512
    request_timeout_seconds: float = 60.0
    max_retries: int = 3
    retry_initial_seconds: float = 1.0
    max_in_flight: int = 4
    n_jobs: int = 4
    # logging
    log_enabled: bool = True
    log_file_path: str = 'prefer_log.txt'
    log_max_file_size_mb: int = 10
    log_rotation_count: int = 3
    log_level: str = 'INFO'

    def __post_init__(self):
        object.__setattr__(self, 'labels', tuple(self.labels))
        self.validate()

    def validate(self):
        """Raise ConfigError on any out-of-range value."""
        checks = [
            (self.k >= 1, f"k must be >= 1, got {self.k}"),
            (self.iterations >= 1, f"iterations must be >= 1, got {self.iterations}"),
            (self.m >= 1, f"m must be >= 1, got {self.m}"),
            (self.num_feedbacks >= 1, f"num_feedbacks must be >= 1, got {self.num_feedbacks}"),
            (0.0 < self.eps < 0.5, f"eps must be in (0, 0.5), got {self.eps}"),
            (0.0 <= self.tau <= 1.0, f"tau must be in [0, 1], got {self.tau}"),
            (self.vote_n >= 1, f"vote_n must be >= 1, got {self.vote_n}"),
            (self.mode in MODES, f"mode must be one of {list(MODES)}, got '{self.mode}'"),
            (self.inference_mode in INFERENCE_MODES,
             f"inference_mode must be one of {list(INFERENCE_MODES)}, got '{self.inference_mode}'"),
            (self.averaging in (None, 'binary', 'macro'),
             f"averaging must be 'binary' or 'macro', got '{self.averaging}'"),
            (self.max_in_flight >= 1, f"max_in_flight must be >= 1, got {self.max_in_flight}"),
            (self.n_jobs >= 1, f"n_jobs must be >= 1, got {self.n_jobs}"),
            (self.max_retries >= 1, f"max_retries must be >= 1, got {self.max_retries}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            label_space = self.label_space
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.positive_label is not None and self.positive_label not in label_space:
            raise ConfigError(f"positive_label '{self.positive_label}' is not one of {list(self.labels)}")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(self.labels)

    def positive(self) -> str:
        """Positive class for binary F1; the first label unless configured."""
        if self.positive_label is None:
            return self.labels[0]
        return self.label_space.canonical(self.positive_label)

    def metric_averaging(self) -> str:
        if self.averaging:
            return self.averaging
        return 'binary' if len(self.labels) == 2 else 'macro'

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['labels'] = list(self.labels)
        return data

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of every result-affecting field."""
        relevant = {k: v for k, v in self.to_dict().items() if k not in NON_RESULT_FIELDS}
        canonical = json.dumps(relevant, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def merged(self, overrides: Mapping[str, Any]) -> 'PreferConfig':
        """Copy with non-None overrides applied."""
        return from_mapping({**self.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name == 'labels':
        if isinstance(value, str):
            value = [part for part in value.split(',')]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"labels must be a list of strings, got {value!r}")
        return tuple(str(label).strip() for label in value)
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ('1', 'true', 'yes', 'on')
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for '{name}': {value!r} ({e})") from e


def from_mapping(data: Mapping[str, Any]) -> PreferConfig:
    """Build a config from a flat mapping; unknown keys are rejected."""
    known = {f.name: f.default for f in fields(PreferConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {name: _coerce(name, value, known[name]) for name, value in data.items()}
    return PreferConfig(**values)


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> PreferConfig:
    """
    Load a run configuration.

    Args:
        path: Flat JSON object of key/value pairs; the bundled manifest
            is used when omitted and missing files are an error otherwise
        overrides: Command-line values; None entries are ignored

    Returns:
        PreferConfig: Validated configuration
    """
    data: Dict[str, Any] = {}
    config_path = Path(path) if path else DEFAULT_CONFIG_PATH
    if path or config_path.exists():
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON at line {e.lineno} column {e.colno}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: expected a flat JSON object")
    nested = sorted(k for k, v in data.items() if isinstance(v, dict))
    if nested:
        raise ConfigError(f"{config_path}: config must be flat, nested sections {nested}")

    config = from_mapping(data)
    if overrides:
        config = config.merged(overrides)
    return config
