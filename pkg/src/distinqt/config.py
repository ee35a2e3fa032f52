"""Versioned YAML run configuration with unknown-key rejection."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .model import PRESETS, ModelConfig, preset
from .topology import (
    Interconnection, NetDescriptor, TimingPlan, Topology, TopologyError, WorkerDescriptor,
    ensure_valid, tod_topology,
)

CONFIG_VERSION = 1
SCHEDULER_MODES = ("deterministic", "threaded")
TRANSPORT_KINDS = ("inprocess", "stream", "hub")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 1000
    patience: int = 10
    val_fraction: float = 0.15
    normalize: bool = True
    seed: int = 42
    mode: str = "deterministic"


@dataclass(frozen=True)
class DataConfig:
    scenario: Optional[str] = None  # directory written by gen-data; None generates in memory
    duration_s: float = 1200.0
    seed: int = 42
    eval_seeds: Tuple[int, ...] = (1001, 1002, 1003)
    eval_duration_s: float = 300.0


@dataclass(frozen=True)
class TransportConfig:
    kind: str = "inprocess"
    listen: str = "127.0.0.1:0"
    remote: Tuple[Tuple[int, int], ...] = ()
    barrier_timeout_s: float = 600.0


@dataclass(frozen=True)
class RunConfig:
    topology: Topology
    model: ModelConfig
    training: TrainingConfig = TrainingConfig()
    data: DataConfig = DataConfig()
    transport: TransportConfig = TransportConfig()
    model_preset: str = "c1"
    raw: Dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def n_ues(self) -> int:
        return self.topology.k(self.topology.net_by_name("tod_ue").net_id)

    @property
    def scheduler_mode(self) -> str:
        """Trainer mode string: the transport kind wins over the in-process scheduler."""
        if self.transport.kind == "inprocess":
            return self.training.mode
        return self.transport.kind


_TOD_KEYS = {"preset", "n_ues", "with_mec", "history_steps", "tau_ms", "encode_step_ms",
             "prediction_step_ms", "horizon_steps"}
_EXPLICIT_KEYS = {"preset", "nets", "workers", "interconnections", "timing"}
_NET_KEYS = {"net_id", "name", "role", "logging_period_ms", "history_steps", "features",
             "encoder_kind", "encoder_units", "is_coordinator"}


def _check_keys(section: str, got: Dict[str, Any], allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(got).__name__}")
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _fields(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls, section: str, d: Dict[str, Any], **conv):
    _check_keys(section, d, _fields(cls))
    kw = {k: conv[k](v) if k in conv else v for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _topology(d: Dict[str, Any], model_preset: str) -> Topology:
    _check_keys("topology", d, _TOD_KEYS | _EXPLICIT_KEYS)
    kind = d.get("preset", "tod")
    if kind == "tod":
        _check_keys("topology", d, _TOD_KEYS)
        kw = {k: v for k, v in d.items() if k != "preset"}
        if kw.get("with_mec") is None:
            kw["with_mec"] = model_preset == "c2"  # c2 adds the MEC features
        try:
            topo = tod_topology(**kw)
        except TypeError as exc:
            raise ConfigError(f"topology: {exc}") from None
    elif kind == "explicit":
        _check_keys("topology", d, _EXPLICIT_KEYS)
        try:
            nets = []
            for n in d["nets"]:
                _check_keys("topology.nets[]", n, _NET_KEYS)
                nets.append(NetDescriptor(**{**n, "features": tuple(n["features"])}))
            workers = [WorkerDescriptor(int(w[0]), int(w[1])) for w in d["workers"]]
            ics = []
            for ic in d["interconnections"]:
                _check_keys("topology.interconnections[]", ic, {"id", "members", "target"})
                ics.append(Interconnection.of(int(ic["id"]), {int(k): int(v) for k, v in ic["members"].items()},
                                              ic.get("target")))
            t = d["timing"]
            _check_keys("topology.timing", t, _fields(TimingPlan))
            topo = Topology(tuple(nets), tuple(workers), tuple(ics), TimingPlan(**t))
        except KeyError as exc:
            raise ConfigError(f"topology: missing key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"topology: {exc}") from None
    else:
        raise ConfigError(f"topology: unknown preset {kind!r}; expected tod or explicit")
    try:
        return ensure_valid(topo)
    except TopologyError as exc:
        raise ConfigError(f"topology: {exc}") from None


def _model(d: Dict[str, Any]) -> Tuple[str, ModelConfig]:
    _check_keys("model", d, {"preset"} | set(_fields(ModelConfig)))
    name = d.get("preset", "c1")
    kw = {k: v for k, v in d.items() if k != "preset"}
    if "head_units" in kw:
        kw["head_units"] = tuple(kw["head_units"])
    try:
        if name == "custom":
            return name, ModelConfig(**kw)
        if name not in PRESETS:
            raise ConfigError(f"model: unknown preset {name!r}; expected c1, c2 or custom")
        return name, preset(name, **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model: {exc}") from None


def parse_config(d: Optional[Dict[str, Any]]) -> RunConfig:
    d = d or {}
    _check_keys("config", d, {"version", "topology", "model", "training", "data", "transport"})
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    model_preset, model = _model(d.get("model") or {})
    topo = _topology(d.get("topology") or {}, model_preset)
    training = _build(TrainingConfig, "training", d.get("training") or {})
    if training.mode not in SCHEDULER_MODES:
        raise ConfigError(f"training: mode must be one of {SCHEDULER_MODES}")
    data = _build(DataConfig, "data", d.get("data") or {}, eval_seeds=tuple)
    transport = _build(TransportConfig, "transport", d.get("transport") or {},
                       remote=lambda r: tuple(tuple(int(x) for x in k) for k in r))
    if transport.kind not in TRANSPORT_KINDS:
        raise ConfigError(f"transport: kind must be one of {TRANSPORT_KINDS}")
    return RunConfig(topo, model, training, data, transport, model_preset, dict(d))


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(d)


def with_overrides(cfg: RunConfig, section: str, **kw) -> RunConfig:
    """Re-parse with some keys replaced, so overrides pass the same validation."""
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in cfg.raw.items()}
    raw.setdefault(section, {})
    raw[section].update({k: v for k, v in kw.items() if v is not None})
    return parse_config(raw)


def dump_config(cfg: RunConfig, path: Path) -> None:
    raw = dict(cfg.raw)
    raw.setdefault("version", CONFIG_VERSION)
    with open(path, "w") as fh:
        yaml.safe_dump(raw, fh, sort_keys=True)
