"""Input reconstruction from an observed context vector.

An attacker holding an encoder's weights and one of its outputs ``v`` searches
for an input ``x_hat`` with ``enc(x_hat) ~= v`` by Adam descent on
``d = ||v - enc(x_hat)||^2``. Encoders are many-to-one, so a tiny ``d`` does
not imply ``x_hat ~= x``; ``similarity`` quantifies how close it got.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import Encoder
from .numcore import Adam, NonFiniteError

log = logging.getLogger(__name__)

STALL_WINDOW = 1000
STALL_DELTA = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    target: Tuple[int, int] = (1, 1)
    lr: float = 3e-4
    max_iter: int = 200_000
    tol: float = 0.0  # stop once d <= tol
    seed: int = 0
    clip_unit: bool = False  # attacker knows inputs were scaled to [0, 1]
    record_every: int = 100


@dataclass
class AttackResult:
    estimate: np.ndarray
    d: float
    iterations: int
    trajectory: List[Tuple[int, float]] = field(default_factory=list)
    u: float = float("nan")
    similarity: float = float("nan")
    per_feature: Optional[np.ndarray] = None


def objective(encoder: Encoder, x_hat: np.ndarray, v: np.ndarray) -> Tuple[float, np.ndarray]:
    """``d`` and its gradient w.r.t. the single window ``x_hat [h, f]``."""
    v_hat = encoder.forward(x_hat[None])[0]
    diff = v_hat - v
    d = float(diff @ diff)
    if not np.isfinite(d):
        raise NonFiniteError("attack objective is not finite")
    grad = encoder.backward((2.0 * diff)[None])[0]
    return d, grad


def reconstruct(encoder: Encoder, v: np.ndarray, cfg: AttackConfig,
                x0: Optional[np.ndarray] = None) -> AttackResult:
    """Adam on the input window; returns the best iterate seen."""
    spec = encoder.spec
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != spec.context_dim:
        raise ValueError(f"context length {v.shape[0]} does not match encoder output {spec.context_dim}")
    if x0 is None:
        x0 = np.random.default_rng(cfg.seed).uniform(0.0, 1.0, size=(spec.history_steps, spec.input_width))
    x = {"x": np.array(x0, dtype=np.float64)}
    if x["x"].shape != (spec.history_steps, spec.input_width):
        raise ValueError(f"estimate shape {x['x'].shape} does not match encoder input")
    opt = Adam(lr=cfg.lr)
    best_d, best_x = np.inf, x["x"].copy()
    checkpoint_d = np.inf
    trajectory = []
    it = 0
    for it in range(cfg.max_iter + 1):
        d, grad = objective(encoder, x["x"], v)
        if d < best_d:
            best_d, best_x = d, x["x"].copy()
        if it % cfg.record_every == 0:
            trajectory.append((it, best_d))
        if best_d <= cfg.tol or it == cfg.max_iter:
            break
        if it % STALL_WINDOW == 0 and it > 0:
            if checkpoint_d - best_d < STALL_DELTA:
                break
            checkpoint_d = best_d
        opt.step(x, {"x": grad})
        if cfg.clip_unit:
            np.clip(x["x"], 0.0, 1.0, out=x["x"])
    if trajectory[-1][0] != it:
        trajectory.append((it, best_d))
    return AttackResult(best_x, float(best_d), it, trajectory)


def similarity(x: np.ndarray, x_hat: np.ndarray) -> Tuple[float, float, np.ndarray]:
    """Euclidean distance ``u``, score ``S = 100/(1+u)`` and per-feature scores (columns)."""
    x, x_hat = np.asarray(x, dtype=float), np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    u = float(np.linalg.norm(x - x_hat))
    diff = (x - x_hat).reshape(x.shape[0], -1) if x.ndim > 1 else (x - x_hat)[:, None]
    per = 100.0 / (1.0 + np.linalg.norm(diff, axis=0))
    return u, 100.0 / (1.0 + u), per


def attack_window(encoder: Encoder, window: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Observe ``enc(window)`` and reconstruct; fills the similarity fields."""
    v = encoder.forward(np.asarray(window, dtype=float)[None])[0]
    res = reconstruct(encoder, v, cfg)
    res.u, res.similarity, res.per_feature = similarity(window, res.estimate)
    return res


def sensitive_features(net_name: str, features: Sequence[str]) -> List[str]:
    """Columns whose leakage matters: UE location, and every BS column except groundtruth."""
    if net_name in ("tod_ue", "ue"):
        return [f for f in features if "lat" in f or "lon" in f]
    return [f for f in features if not f.startswith("thr_")]


def attack_report(net_name: str, features: Sequence[str], results: Sequence[AttackResult],
                  max_points: int = 50) -> dict:
    """Structured summary over attacked windows: d trajectory, S table, per-feature S."""
    per = np.mean([r.per_feature for r in results], axis=0)
    sens = sensitive_features(net_name, features)
    idx = [list(features).index(f) for f in sens]
    traj = results[0].trajectory
    step = max(1, len(traj) // max_points)
    return {
        "net": net_name,
        "n_windows": len(results),
        "d": [r.d for r in results],
        "iterations": [r.iterations for r in results],
        "u_mean": float(np.mean([r.u for r in results])),
        "similarity_mean": float(np.mean([r.similarity for r in results])),
        "similarity_std": float(np.std([r.similarity for r in results])),
        "per_feature": {f: float(s) for f, s in zip(features, per)},
        "sensitive_similarity": float(np.mean(per[idx])) if idx else None,
        "trajectory": [[int(i), float(d)] for i, d in traj[::step]],
    }


def compare_variants(variants: Dict[str, Tuple[Encoder, np.ndarray]], cfg: AttackConfig,
                     seeds: Sequence[int]) -> Dict[str, float]:
    """Mean attacker similarity per variant over the same seeds and window indices.

    ``variants`` maps a name to an encoder and the windows it saw; the same
    window index is attacked in every variant so the instances correspond.
    """
    out = {}
    for name, (enc, windows) in variants.items():
        scores = []
        for s in seeds:
            idx = int(np.random.default_rng(s).integers(len(windows)))
            c = AttackConfig(cfg.target, cfg.lr, cfg.max_iter, cfg.tol, s, cfg.clip_unit, cfg.record_every)
            scores.append(attack_window(enc, windows[idx], c).similarity)
        out[name] = float(np.mean(scores))
    return out
