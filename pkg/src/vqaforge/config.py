"""Pipeline configuration: TOML loading, validation, and fingerprinting.

The configuration is a small frozen dataclass tree mirroring the sections of
the TOML file.  Loading is strict: unknown sections or keys are errors that
name the offending key, so typos fail fast instead of silently running with
defaults.  A fingerprint over the output-affecting parts of the configuration
plus the content of the input files guards resumed runs against drift.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .filtering import STRATEGIES

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "BackendConfig",
    "GenerateConfig",
    "FilterConfig",
    "DedupConfig",
    "AssembleConfig",
    "RunConfig",
    "PipelineConfig",
    "load_config",
    "parse_config",
    "apply_overrides",
    "config_fingerprint",
]


class ConfigError(ValueError):
    """Raised for unreadable, unknown, or out-of-range configuration."""


def _require_int(section: str, key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config key [{section}] {key} must be an integer, got {value!r}")
    return value


def _require_float(section: str, key: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key [{section}] {key} must be a number, got {value!r}")
    return float(value)


def _require_str(section: str, key: str, value: Any) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"config key [{section}] {key} must be a string, got {value!r}")
    return value


def _require_bool(section: str, key: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"config key [{section}] {key} must be a boolean, got {value!r}")
    return value


@dataclass(frozen=True)
class BackendConfig:
    """Settings for the answering backend and its rate/retry policy."""

    url: str = ""
    model: str = "mock"
    rps: float = 10.0
    burst: int = 1
    max_retries: int = 3
    api_key_env: str = ""

    def __post_init__(self) -> None:
        if self.rps <= 0:
            raise ConfigError(f"config key [backend] rps must be positive, got {self.rps!r}")
        if self.burst < 1:
            raise ConfigError(f"config key [backend] burst must be >= 1, got {self.burst!r}")
        if self.max_retries < 0:
            raise ConfigError(
                f"config key [backend] max_retries must be >= 0, got {self.max_retries!r}"
            )


@dataclass(frozen=True)
class GenerateConfig:
    """Settings for question and answer generation."""

    questions_per_image: int = 5
    temperature_question: float = 0.7
    temperature_answer: float = 0.2

    def __post_init__(self) -> None:
        if self.questions_per_image < 1:
            raise ConfigError(
                "config key [generate] questions_per_image must be >= 1, "
                f"got {self.questions_per_image!r}"
            )
        if self.temperature_question < 0:
            raise ConfigError(
                "config key [generate] temperature_question must be >= 0, "
                f"got {self.temperature_question!r}"
            )
        if self.temperature_answer < 0:
            raise ConfigError(
                "config key [generate] temperature_answer must be >= 0, "
                f"got {self.temperature_answer!r}"
            )


@dataclass(frozen=True)
class FilterConfig:
    """Settings for the consistency filter.

    The default strategy for real deployments is the judge backend; test
    fixtures normally pin ``exact_normalized`` for determinism.
    """

    strategy: str = "judge_backend"
    overlap_threshold: float = 0.6
    require_all_pairs: bool = True

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"config key [filter] strategy must be one of {sorted(STRATEGIES)}, "
                f"got {self.strategy!r}"
            )
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ConfigError(
                "config key [filter] overlap_threshold must be in [0, 1], "
                f"got {self.overlap_threshold!r}"
            )


@dataclass(frozen=True)
class DedupConfig:
    """Settings for near-duplicate image removal."""

    max_hamming: int = 3

    def __post_init__(self) -> None:
        if not 0 <= self.max_hamming <= 64:
            raise ConfigError(
                f"config key [dedup] max_hamming must be in [0, 64], got {self.max_hamming!r}"
            )


@dataclass(frozen=True)
class AssembleConfig:
    """Settings for dataset sharding."""

    shard_size: int = 50_000

    def __post_init__(self) -> None:
        if self.shard_size < 1:
            raise ConfigError(
                f"config key [assemble] shard_size must be >= 1, got {self.shard_size!r}"
            )


@dataclass(frozen=True)
class RunConfig:
    """Settings for run execution (parallelism and randomness)."""

    workers: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"config key [run] workers must be >= 1, got {self.workers!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"config key [run] seed must be an integer, got {self.seed!r}")


_COERCERS = {int: _require_int, float: _require_float, str: _require_str, bool: _require_bool}

_SECTION_TYPES: dict[str, type] = {
    "backend": BackendConfig,
    "generate": GenerateConfig,
    "filter": FilterConfig,
    "dedup": DedupConfig,
    "assemble": AssembleConfig,
    "run": RunConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Complete validated configuration for the pipeline."""

    backend: BackendConfig = field(default_factory=BackendConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    assemble: AssembleConfig = field(default_factory=AssembleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_json_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTION_TYPES}

    def fingerprint_payload(self) -> dict[str, Any]:
        """The subset of the configuration that can change run outputs.

        Excluded on purpose: worker count (scheduling only), backend url and
        credential env var (transport only), and rate/retry tuning (timing
        only).  Everything here feeds either generated content or file layout.
        """
        return {
            "model": self.backend.model,
            "questions_per_image": self.generate.questions_per_image,
            "temperature_question": self.generate.temperature_question,
            "temperature_answer": self.generate.temperature_answer,
            "strategy": self.filter.strategy,
            "overlap_threshold": self.filter.overlap_threshold,
            "require_all_pairs": self.filter.require_all_pairs,
            "max_hamming": self.dedup.max_hamming,
            "shard_size": self.assemble.shard_size,
            "seed": self.run.seed,
        }


def parse_config(raw: Mapping[str, Any], *, source: str = "<config>") -> PipelineConfig:
    """Build a validated config from a parsed TOML mapping.

    Unknown sections and unknown keys are hard errors naming the key.
    """
    sections: dict[str, Any] = {}
    for section_name, body in raw.items():
        section_type = _SECTION_TYPES.get(section_name)
        if section_type is None:
            raise ConfigError(f"unknown config section [{section_name}] in {source}")
        if not isinstance(body, Mapping):
            raise ConfigError(f"config section [{section_name}] in {source} must be a table")
        fields = {f.name: f for f in dataclasses.fields(section_type)}
        kwargs: dict[str, Any] = {}
        for key, value in body.items():
            spec_field = fields.get(key)
            if spec_field is None:
                raise ConfigError(f"unknown config key [{section_name}] {key} in {source}")
            coercer = _COERCERS[_FIELD_TYPES[(section_name, key)]]
            kwargs[key] = coercer(section_name, key, value)
        sections[section_name] = section_type(**kwargs)
    return PipelineConfig(**sections)


# Field types by (section, key); dataclass field annotations are strings under
# ``from __future__ import annotations``, so the lookup is explicit.
_FIELD_TYPES: dict[tuple[str, str], type] = {}
for _section_name, _section_type in _SECTION_TYPES.items():
    _hints = {"int": int, "float": float, "str": str, "bool": bool}
    for _f in dataclasses.fields(_section_type):
        _FIELD_TYPES[(_section_name, _f.name)] = _hints[str(_f.type)]


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load configuration from a TOML file; ``None`` means all defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            raw = tomli.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    return parse_config(raw, source=str(path))


def apply_overrides(
    config: PipelineConfig,
    *,
    workers: int | None = None,
    seed: int | None = None,
) -> PipelineConfig:
    """Return a copy of ``config`` with command-line overrides applied."""
    run = config.run
    if workers is not None:
        run = dataclasses.replace(run, workers=_require_int("run", "workers", workers))
    if seed is not None:
        run = dataclasses.replace(run, seed=_require_int("run", "seed", seed))
    return dataclasses.replace(config, run=run)


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_templates_dir(assets_dir: Path) -> str:
    entries = []
    for path in sorted(assets_dir.rglob("*")):
        if path.is_file():
            entries.append([path.relative_to(assets_dir).as_posix(), _hash_file(path)])
    return hashlib.sha256(
        json.dumps(entries, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def config_fingerprint(
    config: PipelineConfig,
    *,
    manifest_path: str | Path | None = None,
    mock_script_path: str | Path | None = None,
    ocr_script_path: str | Path | None = None,
    assets_dir: str | Path | None = None,
) -> str:
    """Deterministic digest of everything that can change run outputs.

    Covers the output-affecting configuration values plus the content (not the
    paths) of the image manifest, the scripted backend and OCR files, and the
    prompt asset directory.  Two runs with equal fingerprints produce
    byte-identical outputs; a resume with a different fingerprint is refused.
    """
    inputs: dict[str, Any] = {}
    for name, path in (
        ("manifest", manifest_path),
        ("mock_script", mock_script_path),
        ("ocr_script", ocr_script_path),
    ):
        if path is None:
            inputs[name] = None
        else:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"fingerprint input {name} not found: {path}")
            inputs[name] = _hash_file(path)
    if assets_dir is None:
        from .prompts import DEFAULT_ASSETS_DIR

        assets_dir = DEFAULT_ASSETS_DIR
    assets_dir = Path(assets_dir)
    if not assets_dir.is_dir():
        raise ConfigError(f"fingerprint input assets directory not found: {assets_dir}")
    inputs["assets"] = _hash_templates_dir(assets_dir)
    payload = {"config": config.fingerprint_payload(), "inputs": inputs}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
