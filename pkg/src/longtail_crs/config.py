"""Run configuration (TOML file + command-line overrides) and run manifests.

Config file grammar: a TOML document with optional top-level keys ``corpus``
(list of paths), ``out`` and ``seed`` and optional tables ``[segmentation]``,
``[acfl]``, ``[similarity]``, ``[retrieval]``, ``[augment]``, ``[embed]``,
``[chat]`` and ``[experiment]`` whose keys mirror the dataclass fields below.
Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .augment import AugmentConfig
from .errors import ConfigError
from .losses import AcflConfig
from .prototype import SimilarityWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SegmentationConfig:
    tail_max: int = 1
    body_max: int = 5
    mode: str = "fixed"


@dataclass(frozen=True)
class RetrievalConfig:
    K: int = 50
    strategy: str = "medoid"


@dataclass(frozen=True)
class EmbedConfig:
    embedder: str = "hashed"
    dim: int = 256
    url: str = ""
    model: str = ""


@dataclass(frozen=True)
class ChatConfig:
    generator: str = "mock"
    judges: str = "mock"
    url: str = ""
    model: str = ""
    judge_models: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentSettings:
    seeds: int = 5
    loss_kinds: tuple[str, ...] = ("ce", "focal", "acfl")
    n_items: int = 500
    n_dialogues: int = 5000
    zipf_exponent: float = 1.2
    epochs: int = 60
    lr_ce: float = 30.0
    lr_focal: float = 30.0
    lr_acfl: float = 1000.0
    # the comparison runs ACFL without the quantile mask and without undersampling
    acfl_k: float = 0.0
    acfl_theta_max: int = 100_000


def _default_augment() -> AugmentConfig:
    return AugmentConfig(temperature=0.7)


@dataclass(frozen=True)
class RunConfig:
    corpus: tuple[str, ...] = ()
    out: str = "out"
    seed: int = 0
    k_values: tuple[int, ...] = (1, 10, 50)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    acfl: AcflConfig = field(default_factory=AcflConfig)
    similarity: SimilarityWeights = field(default_factory=SimilarityWeights)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    augment: AugmentConfig = field(default_factory=_default_augment)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    chat: ChatConfig = field(default_factory=ChatConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def __post_init__(self):
        ks = tuple(int(k) for k in self.k_values)
        if not ks or list(ks) != sorted(set(ks)) or ks[0] < 1:
            raise ConfigError(f"k_values must be positive and strictly ascending, got {list(ks)}")
        object.__setattr__(self, "k_values", ks)
        object.__setattr__(self, "corpus", tuple(str(p) for p in self.corpus))

    def check_paths(self) -> None:
        for p in self.corpus:
            if not Path(p).is_file():
                raise ConfigError(f"corpus file not found: {p}")

    def snapshot(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return sha256_bytes(json.dumps(self.snapshot(), sort_keys=True, default=list).encode())

    def module_seed(self, label: str) -> int:
        """Independent seed for one consumer of randomness, derived from ``seed`` and a fixed label."""
        h = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return int.from_bytes(h[:4], "big")


SECTIONS = {
    "segmentation": SegmentationConfig, "acfl": AcflConfig, "similarity": SimilarityWeights,
    "retrieval": RetrievalConfig, "augment": AugmentConfig, "embed": EmbedConfig,
    "chat": ChatConfig, "experiment": ExperimentSettings,
}
TOP_LEVEL = ("corpus", "out", "seed", "k_values")


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def _merge_section(cls, base, values: Mapping[str, Any], where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    try:
        return dataclasses.replace(base, **{k: _tuplify(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def build_config(file_values: Mapping[str, Any] | None = None,
                 overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides.

    ``overrides`` uses dotted keys (``"acfl.gamma"``) or top-level names;
    ``None`` values are ignored so unset flags never shadow the file.
    """
    layered: dict[str, dict] = {}
    top: dict[str, Any] = {}
    for source in (file_values or {}, _undot(overrides or {})):
        for key, val in source.items():
            if key in SECTIONS:
                if not isinstance(val, Mapping):
                    raise ConfigError(f"[{key}] must be a table")
                layered.setdefault(key, {}).update(val)
            elif key in TOP_LEVEL:
                top[key] = _tuplify(val)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig()
    kwargs = {}
    for name, values in layered.items():
        kwargs[name] = _merge_section(SECTIONS[name], getattr(cfg, name), values, name)
    try:
        return dataclasses.replace(cfg, **top, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _undot(overrides: Mapping[str, Any]) -> dict:
    out: dict[str, Any] = {}
    for key, val in overrides.items():
        if val is None:
            continue
        if "." in key:
            sec, name = key.split(".", 1)
            out.setdefault(sec, {})[name] = val
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    file_values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_values = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return build_config(file_values, overrides)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_artifact(self, path) -> None:
        self.artifacts[Path(path).name] = sha256_file(path)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> Path:
        self.finished_at = _now()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def verify(self, out_dir) -> list[str]:
        """Names of inputs or artifacts whose current digest differs from the recorded one."""
        bad = [p for p, d in self.inputs.items() if not Path(p).is_file() or sha256_file(p) != d]
        for name, d in self.artifacts.items():
            p = Path(out_dir) / name
            if not p.is_file() or sha256_file(p) != d:
                bad.append(name)
        return bad
