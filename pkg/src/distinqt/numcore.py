"""Small deterministic layer engine with hand-written backward passes.

Every numeric carrier is a float64 ``numpy.ndarray``. Layers cache what they
need during ``forward`` and consume it in ``backward``; gradients land in the
layer's ``grads`` dict under the same keys as ``params``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

DTYPE = np.float64

ACTIVATIONS = ("relu", "identity", "tanh")


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class MissingCacheError(RuntimeError):
    """Raised when ``backward`` is called without a matching ``forward``."""


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite x
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(z: np.ndarray, y: np.ndarray, dy: np.ndarray, kind: str) -> np.ndarray:
    """Gradient through an activation given pre-activation ``z`` and output ``y``."""
    if kind == "relu":
        return dy * (z > 0.0)
    if kind == "identity":
        return dy
    if kind == "tanh":
        return dy * (1.0 - y * y)
    raise ValueError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base class: named parameters, matching grads, optional L2 on weight matrices."""

    regularized: Tuple[str, ...] = ()

    def __init__(self, l2: float = 0.0):
        if l2 < 0:
            raise ValueError("L2 lambda must be non-negative")
        self.l2 = float(l2)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def l2_penalty(self) -> float:
        if self.l2 == 0.0:
            return 0.0
        return self.l2 * float(sum(np.sum(self.params[k] ** 2) for k in self.regularized))

    def _add_l2_grads(self) -> None:
        if self.l2 == 0.0:
            return
        for k in self.regularized:
            self.grads[k] = self.grads[k] + 2.0 * self.l2 * self.params[k]

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


class Dense(Layer):
    """Affine map followed by an elementwise activation.

    Accepts inputs of shape ``[..., in]``; leading dims are treated as batch.
    """

    regularized = ("W",)

    def __init__(self, n_in: int, n_out: int, activation: str = "relu", l2: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(l2)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot_uniform(rng, n_in, n_out, (n_in, n_out)),
            "b": np.zeros(n_out, dtype=DTYPE),
        }
        self.zero_grads()
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects last dim {self.n_in}, got shape {x.shape}")
        z = x @ self.params["W"] + self.params["b"]
        y = check_finite(activate(z, self.activation), "dense output")
        self._cache = (x, z, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise MissingCacheError("dense backward without forward")
        x, z, y = self._cache
        dz = activate_grad(z, y, as_tensor(dy), self.activation)
        x2 = x.reshape(-1, self.n_in)
        dz2 = dz.reshape(-1, self.n_out)
        self.grads = {"W": x2.T @ dz2, "b": dz2.sum(axis=0)}
        self._add_l2_grads()
        return dz @ self.params["W"].T


class LSTM(Layer):
    """Standard LSTM; gate column blocks ordered (input, forget, cell, output).

    ``forward`` takes ``[T, in]`` or ``[B, T, in]`` and returns hidden states with
    the same leading layout plus the final ``(h, c)``.
    """

    regularized = ("W", "U")

    def __init__(self, n_in: int, units: int, l2: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(l2)
        self.n_in, self.units = n_in, units
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot_uniform(rng, n_in, 4 * units, (n_in, 4 * units)),
            "U": glorot_uniform(rng, units, 4 * units, (units, 4 * units)),
            "b": np.zeros(4 * units, dtype=DTYPE),
        }
        self.zero_grads()
        self._cache = None
        self.dh0: Optional[np.ndarray] = None
        self.dc0: Optional[np.ndarray] = None

    def forward(self, seq: np.ndarray, h0: Optional[np.ndarray] = None,
                c0: Optional[np.ndarray] = None):
        seq = as_tensor(seq)
        unbatched = seq.ndim == 2
        if unbatched:
            seq = seq[None]
        if seq.ndim != 3 or seq.shape[-1] != self.n_in:
            raise ValueError(f"lstm expects [B, T, {self.n_in}], got {seq.shape}")
        B, T, _ = seq.shape
        u = self.units
        h = np.zeros((B, u), dtype=DTYPE) if h0 is None else np.broadcast_to(as_tensor(h0), (B, u)).copy()
        c = np.zeros((B, u), dtype=DTYPE) if c0 is None else np.broadcast_to(as_tensor(c0), (B, u)).copy()
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        xw = seq @ W + b  # input projection for every step at once
        hs = np.empty((B, T, u), dtype=DTYPE)
        cs = np.empty((B, T, u), dtype=DTYPE)
        gates = np.empty((B, T, 4 * u), dtype=DTYPE)
        h_prev = np.empty((B, T, u), dtype=DTYPE)
        c_prev = np.empty((B, T, u), dtype=DTYPE)
        for t in range(T):
            h_prev[:, t], c_prev[:, t] = h, c
            z = xw[:, t] + h @ U
            i = sigmoid(z[:, :u])
            f = sigmoid(z[:, u:2 * u])
            g = np.tanh(z[:, 2 * u:3 * u])
            o = sigmoid(z[:, 3 * u:])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            hs[:, t], cs[:, t] = h, c
        check_finite(hs, "lstm hidden states")
        self._cache = (seq, gates, hs, cs, h_prev, c_prev, unbatched)
        if unbatched:
            return hs[0], h[0], c[0]
        return hs, h, c

    def backward(self, dhs: np.ndarray, dhT: Optional[np.ndarray] = None,
                 dcT: Optional[np.ndarray] = None) -> np.ndarray:
        """Backprop through time. ``dhs`` is the gradient on every hidden state;
        ``dhT``/``dcT`` are extra gradients on the final state. Returns d(seq)."""
        if self._cache is None:
            raise MissingCacheError("lstm backward without forward")
        seq, gates, hs, cs, h_prev, c_prev, unbatched = self._cache
        dhs = as_tensor(dhs)
        if unbatched:
            dhs = dhs[None]
        B, T, _ = seq.shape
        u = self.units
        U = self.params["U"]
        dh_next = np.zeros((B, u), dtype=DTYPE)
        dc_next = np.zeros((B, u), dtype=DTYPE)
        if dhT is not None:
            dh_next = dh_next + (as_tensor(dhT)[None] if unbatched else as_tensor(dhT))
        if dcT is not None:
            dc_next = dc_next + (as_tensor(dcT)[None] if unbatched else as_tensor(dcT))
        dz_all = np.empty((B, T, 4 * u), dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            i = gates[:, t, :u]
            f = gates[:, t, u:2 * u]
            g = gates[:, t, 2 * u:3 * u]
            o = gates[:, t, 3 * u:]
            tc = np.tanh(cs[:, t])
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            dg = dc * i
            df = dc * c_prev[:, t]
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dz_all[:, t] = dz
            dh_next = dz @ U.T
            dc_next = dc * f
        dz2 = dz_all.reshape(B * T, 4 * u)
        self.grads = {
            "W": seq.reshape(B * T, self.n_in).T @ dz2,
            "U": h_prev.reshape(B * T, u).T @ dz2,
            "b": dz2.sum(axis=0),
        }
        self._add_l2_grads()
        dseq = dz_all @ self.params["W"].T
        self.dh0, self.dc0 = dh_next, dc_next
        if unbatched:
            self.dh0, self.dc0 = dh_next[0], dc_next[0]
            return dseq[0]
        return dseq


class BiLSTM(Layer):
    """Two LSTMs over the sequence in opposite directions.

    Per-step output is ``[forward_h(t); backward_h(t)]``; the summary vector is
    ``[forward_h(T-1); backward_h(0)]``, i.e. each direction's final state.
    """

    def __init__(self, n_in: int, units: int, l2: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(l2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.units = n_in, units
        self.fwd = LSTM(n_in, units, l2, rng)
        self.bwd = LSTM(n_in, units, l2, rng)
        self._link()

    def _link(self) -> None:
        self.params = {**{f"fwd.{k}": v for k, v in self.fwd.params.items()},
                       **{f"bwd.{k}": v for k, v in self.bwd.params.items()}}
        self.grads = {**{f"fwd.{k}": v for k, v in self.fwd.grads.items()},
                      **{f"bwd.{k}": v for k, v in self.bwd.grads.items()}}

    def l2_penalty(self) -> float:
        return self.fwd.l2_penalty() + self.bwd.l2_penalty()

    def forward(self, seq: np.ndarray):
        """Returns ``(outputs [.., T, 2u], summary [.., 2u])``."""
        seq = as_tensor(seq)
        hf, hTf, _ = self.fwd.forward(seq)
        hb_rev, hTb, _ = self.bwd.forward(np.flip(seq, axis=-2))
        hb = np.flip(hb_rev, axis=-2)
        return np.concatenate([hf, hb], axis=-1), np.concatenate([hTf, hTb], axis=-1)

    def backward(self, douts: Optional[np.ndarray] = None,
                 dsummary: Optional[np.ndarray] = None) -> np.ndarray:
        if self.fwd._cache is None:
            raise MissingCacheError("bilstm backward without forward")
        u = self.units
        seq = self.fwd._cache[0]
        unbatched = self.fwd._cache[-1]
        shape = seq.shape[1:] if unbatched else seq.shape
        out_shape = shape[:-1] + (2 * u,)
        douts = np.zeros(out_shape, dtype=DTYPE) if douts is None else as_tensor(douts)
        dsum = np.zeros(out_shape[:-2] + (2 * u,), dtype=DTYPE) if dsummary is None else as_tensor(dsummary)
        dseq_f = self.fwd.backward(douts[..., :u], dhT=dsum[..., :u])
        dseq_b_rev = self.bwd.backward(np.flip(douts[..., u:], axis=-2), dhT=dsum[..., u:])
        self._link()
        return dseq_f + np.flip(dseq_b_rev, axis=-2)

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            side, name = k.split(".", 1)
            getattr(self, side).params[name][...] = v
        self._link()


@dataclass
class Adam:
    """Adam with bias-corrected moments; state is keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            if grads[k].shape != p.shape:
                raise ValueError(f"grad shape {grads[k].shape} != param shape {p.shape} for {k}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            check_finite(p, f"parameter {k}")


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, np.ndarray]:
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred - truth
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    return loss, 2.0 * diff / diff.size


class Fragment:
    """A model piece wired for gradient checking.

    Subclasses provide ``params`` (name -> array, mutated in place),
    ``forward()`` on fixed internal inputs, and ``backward(dout)`` filling
    ``grads`` and returning the input gradient (or ``None``).
    """

    params: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray]
    inputs: Optional[np.ndarray] = None

    def forward(self) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> Optional[np.ndarray]:
        raise NotImplementedError

    def penalty(self) -> float:
        return 0.0


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(fragment: Fragment, seed: int = 0, h: float = 1e-5,
               check_inputs: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(r * out) + penalty`` with ``r`` drawn from
    ``seed``, so every output element contributes with a distinct weight.
    """
    rng = np.random.default_rng(seed)
    out = fragment.forward()
    r = rng.uniform(-1.0, 1.0, size=out.shape)

    def objective() -> float:
        return float(np.sum(r * fragment.forward())) + fragment.penalty()

    fragment.forward()
    dx = fragment.backward(r)
    analytic = {k: v.copy() for k, v in fragment.grads.items()}
    worst = 0.0
    targets = list(fragment.params.items())
    if check_inputs and fragment.inputs is not None and dx is not None:
        targets.append(("<input>", fragment.inputs))
        analytic["<input>"] = dx.copy()
    for name, arr in targets:
        num = numeric_grad(objective, arr, h)
        worst = max(worst, _rel_err(analytic[name], num))
    return worst


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``arr`` (mutated in place)."""
    num = np.zeros_like(arr)
    flat, nflat = arr.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        nflat[i] = (fp - fm) / (2.0 * h)
    return num
