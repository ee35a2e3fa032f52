"""Multi-headed encoder / merge / decoder / head assembly.

Encoders live with workers; the merge, decoder and head live with the
coordinator. ``CentralizedModel`` wires the same pieces into one object and
serves as the equivalence oracle for the distributed pipeline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import (
    DTYPE, Adam, BiLSTM, Dense, LSTM, MissingCacheError, activate, activate_grad,
    as_tensor, check_finite, mse_loss,
)
from .topology import Interconnection, Topology

log = logging.getLogger(__name__)

WorkerKey = Tuple[int, int]
MERGE_FUNCTIONS = ("concat", "sum", "average")

_ENCODER_TAG = 1
_DECODER_TAG = 2


def component_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator per model component, so NET ``e``'s encoder init
    depends only on ``(seed, e)`` no matter how many workers exist."""
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


@dataclass(frozen=True)
class EncoderSpec:
    layer_kind: str
    units: int
    input_width: int
    history_steps: int
    l2: float = 0.0
    activation: str = "relu"

    @property
    def context_dim(self) -> int:
        return 2 * self.units if self.layer_kind == "bilstm" else self.units


@dataclass(frozen=True)
class DecoderHeadSpec:
    decoder_units: int
    head_layers: Tuple[Tuple[int, str], ...]
    horizon_steps: int
    output_bias: float = 0.0

    def __post_init__(self):
        if not self.head_layers or self.head_layers[-1][0] != 1:
            raise ValueError("final head layer must have width 1")


@dataclass(frozen=True)
class ModelConfig:
    encoder_kind: str = "bilstm"
    encoder_units: int = 100
    decoder_units: int = 300
    head_units: Tuple[int, ...] = (200,)
    merge_fn: str = "concat"
    l2: float = 1e-6
    lr: float = 1e-3
    batch_size: int = 64
    activation: str = "relu"
    output_activation: str = "relu"
    output_bias_init: float = 0.5  # middle of the scaled target range; keeps a ReLU output alive at start

    def __post_init__(self):
        if self.merge_fn not in MERGE_FUNCTIONS:
            raise ValueError(f"unknown merge function {self.merge_fn!r}")
        if self.l2 < 0:
            raise ValueError("L2 lambda must be non-negative")

    def encoder_spec(self, topo: Topology, net_id: int) -> EncoderSpec:
        net = topo.net(net_id)
        return EncoderSpec(
            layer_kind=net.encoder_kind or self.encoder_kind,
            units=net.encoder_units or self.encoder_units,
            input_width=len(net.features),
            history_steps=net.history_steps,
            l2=self.l2,
            activation=self.activation,
        )

    def decoder_spec(self, topo: Topology) -> DecoderHeadSpec:
        layers = tuple((w, self.activation) for w in self.head_units) + ((1, self.output_activation),)
        return DecoderHeadSpec(self.decoder_units, layers, topo.timing.horizon_steps, self.output_bias_init)

    def merged_dim(self, topo: Topology) -> int:
        dims = [self.encoder_spec(topo, e).context_dim for e in topo.net_ids]
        if self.merge_fn == "concat":
            return sum(dims)
        if len(set(dims)) != 1:
            raise ValueError(f"{self.merge_fn} merge needs equal context lengths, got {dims}")
        return dims[0]


PRESETS = {
    "c1": ModelConfig(encoder_units=100, decoder_units=300, head_units=(200,), l2=1e-6, lr=1e-3,
                      batch_size=64),
    "c2": ModelConfig(encoder_units=100, decoder_units=200, head_units=(100,), l2=1e-8, lr=5e-5,
                      batch_size=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# ---------------------------------------------------------------- encoder

class Encoder:
    """Maps history windows ``[B, h_e, features]`` to context vectors ``[B, N_e]``."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        if spec.layer_kind == "bilstm":
            self.core = BiLSTM(spec.input_width, spec.units, spec.l2, rng)
        elif spec.layer_kind == "lstm":
            self.core = LSTM(spec.input_width, spec.units, spec.l2, rng)
        elif spec.layer_kind == "dense_stack":
            self.core = Dense(spec.input_width * spec.history_steps, spec.units, "identity",
                              spec.l2, rng)
        else:
            raise ValueError(f"unknown encoder kind {spec.layer_kind!r}")
        self._cache = None

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.core.params

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        return self.core.grads

    def l2_penalty(self) -> float:
        return self.core.l2_penalty()

    def forward(self, windows: np.ndarray) -> np.ndarray:
        x = as_tensor(windows)
        if x.ndim != 3 or x.shape[1:] != (self.spec.history_steps, self.spec.input_width):
            raise ValueError(
                f"encoder expects [B, {self.spec.history_steps}, {self.spec.input_width}], got {x.shape}")
        kind = self.spec.layer_kind
        if kind == "bilstm":
            _, z = self.core.forward(x)
        elif kind == "lstm":
            _, z, _ = self.core.forward(x)
        else:
            z = self.core.forward(x.reshape(x.shape[0], -1))
        v = check_finite(activate(z, self.spec.activation), "context vector")
        self._cache = (x.shape, z, v)
        return v

    def backward(self, dctx: np.ndarray) -> np.ndarray:
        """Fills ``grads`` and returns the gradient w.r.t. the input windows."""
        if self._cache is None:
            raise MissingCacheError("encoder backward without forward")
        shape, z, v = self._cache
        dz = activate_grad(z, v, as_tensor(dctx), self.spec.activation)
        kind = self.spec.layer_kind
        if kind == "bilstm":
            return self.core.backward(None, dz)
        if kind == "lstm":
            return self.core.backward(np.zeros(shape[:2] + (self.spec.units,)), dhT=dz)
        return self.core.backward(dz).reshape(shape)

    def get_weights(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_weights(self, weights: Dict[str, np.ndarray]) -> None:
        if set(weights) != set(self.params):
            raise ValueError("weight names do not match the encoder")
        for k, v in weights.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k][...] = v


def build_encoder(spec: EncoderSpec, seed: int, net_id: int) -> Encoder:
    return Encoder(spec, component_rng(seed, _ENCODER_TAG, net_id))


@dataclass
class ContextVector:
    values: np.ndarray
    net_id: int
    worker_id: int
    t: int = 0


@dataclass
class MergedVector:
    values: np.ndarray
    interconnection_id: int
    t: int = 0
    slices: Dict[int, slice] = field(default_factory=dict)  # net_id -> span in values


def encode(encoder: Encoder, window: np.ndarray, net_id: int = 0, worker_id: int = 0,
           t: int = 0) -> ContextVector:
    """Encode a single ``[h_e, features]`` window."""
    window = as_tensor(window)
    if window.shape[0] != encoder.spec.history_steps:
        raise ValueError(f"expected {encoder.spec.history_steps} history rows, got {window.shape[0]}")
    v = encoder.forward(window[None])[0]
    if not v.any():
        log.warning("worker (%d, %d) produced an all-zero context vector at t=%d", net_id, worker_id, t)
    return ContextVector(v, net_id, worker_id, t)


def merge_arrays(parts: Sequence[np.ndarray], fn: str) -> np.ndarray:
    """Combine ``[..., N_e]`` arrays along the last axis (concat) or elementwise."""
    if not parts:
        raise ValueError("nothing to merge")
    if fn == "concat":
        return np.concatenate(parts, axis=-1)
    if len({p.shape for p in parts}) != 1:
        raise ValueError(f"{fn} merge needs equal shapes, got {[p.shape for p in parts]}")
    total = parts[0].copy()
    for p in parts[1:]:
        total = total + p
    if fn == "sum":
        return total
    if fn == "average":
        return total / len(parts)
    raise ValueError(f"unknown merge function {fn!r}")


def merge(contexts: Sequence[ContextVector], fn: str = "concat", interconnection_id: int = 0,
          net_order: Optional[Sequence[int]] = None) -> MergedVector:
    """Merge one context per NET, in ``net_order`` (ascending NET id by default)."""
    by_net = {}
    for c in contexts:
        if c.net_id in by_net:
            raise ValueError(f"two contexts for NET {c.net_id}")
        by_net[c.net_id] = c
    order = list(net_order) if net_order is not None else sorted(by_net)
    missing = [e for e in order if e not in by_net]
    if missing:
        raise ValueError(f"missing context for NET(s) {missing}")
    parts = [by_net[e].values for e in order]
    values = merge_arrays(parts, fn)
    slices, start = {}, 0
    for e, p in zip(order, parts):
        if fn == "concat":
            slices[e] = slice(start, start + p.shape[-1])
            start += p.shape[-1]
        else:
            slices[e] = slice(0, p.shape[-1])
    ts = {c.t for c in contexts}
    return MergedVector(values, interconnection_id, ts.pop() if len(ts) == 1 else 0, slices)


def unslice(m: MergedVector) -> Dict[int, np.ndarray]:
    return {e: m.values[..., s] for e, s in m.slices.items()}


# ---------------------------------------------------------------- decoder

class DecoderHead:
    """Repeat the merged vector ``p`` times, run the LSTM decoder from zero
    state, and map every hidden state through the shared head to one scalar."""

    def __init__(self, merged_dim: int, spec: DecoderHeadSpec, l2: float,
                 rng: np.random.Generator):
        self.spec = spec
        self.merged_dim = merged_dim
        self.decoder = LSTM(merged_dim, spec.decoder_units, l2, rng)
        self.head: List[Dense] = []
        width = spec.decoder_units
        for out, act in spec.head_layers:
            self.head.append(Dense(width, out, act, l2, rng))
            width = out
        self.head[-1].params["b"][...] = spec.output_bias
        self._link()

    def _layers(self):
        return [("decoder", self.decoder)] + [(f"head{i}", d) for i, d in enumerate(self.head)]

    def _link(self) -> None:
        self.params = {f"{n}.{k}": v for n, layer in self._layers() for k, v in layer.params.items()}
        self.grads = {f"{n}.{k}": v for n, layer in self._layers() for k, v in layer.grads.items()}

    def l2_penalty(self) -> float:
        return sum(layer.l2_penalty() for _, layer in self._layers())

    def forward(self, m: np.ndarray) -> np.ndarray:
        m = as_tensor(m)
        if m.ndim != 2 or m.shape[1] != self.merged_dim:
            raise ValueError(f"decoder expects [B, {self.merged_dim}], got {m.shape}")
        p = self.spec.horizon_steps
        seq = np.repeat(m[:, None, :], p, axis=1)
        hs, _, _ = self.decoder.forward(seq)
        y = hs
        for d in self.head:
            y = d.forward(y)
        return y[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        g = as_tensor(dy)[..., None]
        for d in reversed(self.head):
            g = d.backward(g)
        dseq = self.decoder.backward(g)
        self._link()
        return dseq.sum(axis=1)


def build_decoder_head(config: ModelConfig, topo: Topology, seed: int) -> DecoderHead:
    return DecoderHead(config.merged_dim(topo), config.decoder_spec(topo), config.l2,
                       component_rng(seed, _DECODER_TAG))


class CoordinatorModel:
    """Merging layer + decoder + head over every interconnection.

    ``forward`` takes one ``[s, N_e]`` context batch per worker and returns
    predictions ``[s, A, p]`` with interconnections in ascending id order.
    """

    def __init__(self, config: ModelConfig, topo: Topology, seed: int):
        self.config = config
        self.net_order = topo.net_ids
        self.interconnections: List[Interconnection] = sorted(
            topo.interconnections, key=lambda ic: ic.interconnection_id)
        self.decoder_head = build_decoder_head(config, topo, seed)
        self._cache = None

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.decoder_head.params

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        return self.decoder_head.grads

    def add_interconnection(self, ic: Interconnection) -> None:
        self.interconnections = sorted(self.interconnections + [ic], key=lambda i: i.interconnection_id)

    def merged_batch(self, contexts: Dict[WorkerKey, np.ndarray]) -> np.ndarray:
        merged = []
        for ic in self.interconnections:
            members = ic.member_map
            try:
                parts = [contexts[(e, members[e])] for e in self.net_order]
            except KeyError as exc:
                raise ValueError(f"interconnection {ic.interconnection_id}: missing context {exc}") from None
            merged.append(merge_arrays(parts, self.config.merge_fn))
        return np.stack(merged, axis=1)  # [s, A, M]

    def forward(self, contexts: Dict[WorkerKey, np.ndarray]) -> np.ndarray:
        m = self.merged_batch(contexts)
        s, A, M = m.shape
        y = self.decoder_head.forward(m.reshape(s * A, M))
        self._cache = (s, A, {k: v.shape for k, v in contexts.items()})
        return y.reshape(s, A, -1)

    def backward_partition(self, dy: np.ndarray) -> Dict[WorkerKey, np.ndarray]:
        """Fill decoder/head grads; return dLoss/d(context) per worker, summed
        over every interconnection the worker belongs to."""
        if self._cache is None:
            raise MissingCacheError("coordinator backward without forward")
        s, A, shapes = self._cache
        dm = self.decoder_head.backward(as_tensor(dy).reshape(s * A, -1)).reshape(s, A, -1)
        out = {k: np.zeros(shape, dtype=DTYPE) for k, shape in shapes.items()}
        for a, ic in enumerate(self.interconnections):
            members = ic.member_map
            start = 0
            for e in self.net_order:
                key = (e, members[e])
                n = shapes[key][-1]
                if self.config.merge_fn == "concat":
                    out[key] += dm[:, a, start:start + n]
                    start += n
                elif self.config.merge_fn == "sum":
                    out[key] += dm[:, a]
                else:
                    out[key] += dm[:, a] / len(self.net_order)
        return out


# ---------------------------------------------------------------- oracle

class CentralizedModel:
    """One-process model computing the same function as the distributed
    assembly when every NET has a single worker. Shares seeding with it."""

    def __init__(self, config: ModelConfig, topo: Topology, seed: int):
        for e in topo.net_ids:
            if topo.k(e) != 1:
                raise ValueError("centralized oracle requires exactly one worker per NET")
        self.config = config
        self.topo = topo
        self.keys = [(e, topo.workers_of(e)[0].worker_id) for e in topo.net_ids]
        self.encoders = {key: build_encoder(config.encoder_spec(topo, key[0]), seed, key[0])
                         for key in self.keys}
        self.coordinator = CoordinatorModel(config, topo, seed)
        self.optimizer = Adam(lr=config.lr)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        out = {f"enc{e}.{k}": v for (e, _), enc in self.encoders.items() for k, v in enc.params.items()}
        out.update({f"coord.{k}": v for k, v in self.coordinator.params.items()})
        return out

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        out = {f"enc{e}.{k}": v for (e, _), enc in self.encoders.items() for k, v in enc.grads.items()}
        out.update({f"coord.{k}": v for k, v in self.coordinator.grads.items()})
        return out

    def forward(self, windows: Dict[WorkerKey, np.ndarray]) -> np.ndarray:
        contexts = {key: self.encoders[key].forward(windows[key]) for key in self.keys}
        return self.coordinator.forward(contexts)

    def backward(self, dy: np.ndarray) -> Dict[WorkerKey, np.ndarray]:
        dctx = self.coordinator.backward_partition(dy)
        return {key: self.encoders[key].backward(dctx[key]) for key in self.keys}

    def train_step(self, windows: Dict[WorkerKey, np.ndarray], targets: np.ndarray) -> float:
        y = self.forward(windows)
        loss, dy = mse_loss(y, targets)
        self.backward(dy)
        # per-component steps mirror the distributed optimizers exactly
        self.optimizer.step(self.params, self.grads)
        return loss

    def l2_penalty(self) -> float:
        return (sum(e.l2_penalty() for e in self.encoders.values())
                + self.coordinator.decoder_head.l2_penalty())


def count_params(config: ModelConfig, topo: Topology) -> int:
    total = 0
    for e in topo.net_ids:
        s = config.encoder_spec(topo, e)
        per_lstm = 4 * s.units * (s.input_width + s.units) + 4 * s.units
        if s.layer_kind == "bilstm":
            total += topo.k(e) * 2 * per_lstm
        elif s.layer_kind == "lstm":
            total += topo.k(e) * per_lstm
        else:
            total += topo.k(e) * (s.input_width * s.history_steps + 1) * s.units
    d = config.decoder_units
    total += 4 * d * (config.merged_dim(topo) + d) + 4 * d
    width = d
    for out, _ in config.decoder_spec(topo).head_layers:
        total += (width + 1) * out
        width = out
    return total


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DQCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> str:
    """Write named float64 tensors; returns the payload sha256."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "f64", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = json.dumps({"version": CHECKPOINT_VERSION, "tensors": entries, "sha256": digest,
                           "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack(">HI", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(payload)
    return digest


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, mlen = struct.unpack(">HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[10:10 + mlen].decode("utf-8"))
    payload = raw[10 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError("checksum mismatch")
    out = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(DTYPE).reshape(e["shape"])
    return out, manifest.get("meta", {})
