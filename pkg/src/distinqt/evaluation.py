"""Forecast metrics in Mbps, a persistence baseline and checkpoint inference."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np

from .data import (
    KpiScale, Scaling, ScenarioConfig, WindowedDataset, generate_scenario, scaled_windows, worker_tables,
)
from .model import CoordinatorModel, ModelConfig, build_encoder
from .topology import Topology

if TYPE_CHECKING:
    from .config import RunConfig

CSV_COLUMNS = ("horizon_step_ms", "mae_mbps", "std_mbps")


@dataclass
class MetricsReport:
    overall_mae: float
    overall_std: float
    last_step_mae: float
    last_step_std: float
    per_horizon_mae: np.ndarray
    per_horizon_std: np.ndarray
    n_windows: int
    scenario: str = ""
    model: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_horizon_mae"] = self.per_horizon_mae.tolist()
        d["per_horizon_std"] = self.per_horizon_std.tolist()
        return d


def _as_rows(a: np.ndarray) -> np.ndarray:
    """``[n, p]`` or ``[n, A, p]`` -> ``[n*A, p]``; each interconnection's forecast is one window."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 3:
        return a.reshape(-1, a.shape[-1])
    if a.ndim != 2:
        raise ValueError(f"expected [n, p] or [n, A, p], got {a.shape}")
    return a


def compute_mae(predictions: np.ndarray, truths: np.ndarray, denormalizer: Optional[KpiScale] = None,
                scenario: str = "", model: str = "") -> MetricsReport:
    """Absolute errors pooled over every (window, horizon step); stds are across windows."""
    pred, truth = _as_rows(predictions), _as_rows(truths)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if denormalizer is not None:
        pred, truth = denormalizer.inverse(pred), denormalizer.inverse(truth)
    err = np.abs(pred - truth)
    return MetricsReport(
        overall_mae=float(err.mean()), overall_std=float(err.std()),
        last_step_mae=float(err[:, -1].mean()), last_step_std=float(err[:, -1].std()),
        per_horizon_mae=err.mean(axis=0), per_horizon_std=err.std(axis=0),
        n_windows=err.shape[0], scenario=scenario, model=model)


def persistence_baseline(last_observed: np.ndarray, horizon_steps: int) -> np.ndarray:
    """Repeat the last observed KPI value for every horizon step."""
    last = np.asarray(last_observed, dtype=float)
    return np.repeat(last[..., None], horizon_steps, axis=-1)


def write_horizon_csv(path: Path, report: MetricsReport, prediction_step_ms: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for j, (m, s) in enumerate(zip(report.per_horizon_mae, report.per_horizon_std), start=1):
            w.writerow([j * prediction_step_ms, f"{m:.6f}", f"{s:.6f}"])


def read_horizon_csv(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class CheckpointModel:
    """Inference with one global encoder per NET (every worker of a NET shares it)."""

    def __init__(self, tensors: Dict[str, np.ndarray], config: ModelConfig, topo: Topology):
        self.topo = topo
        self.encoders = {}
        for e in topo.net_ids:
            enc = build_encoder(config.encoder_spec(topo, e), 0, e)
            prefix = f"enc{e}."
            enc.set_weights({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
            self.encoders[e] = enc
        self.coordinator = CoordinatorModel(config, topo, 0)
        for k, v in self.coordinator.params.items():
            v[...] = tensors[f"coord.{k}"]

    def predict(self, ds: WindowedDataset, chunk: int = 512) -> np.ndarray:
        keys = sorted({m for ic in self.coordinator.interconnections for m in ic.members})
        out = []
        for start in range(0, len(ds), chunk):
            sl = slice(start, min(len(ds), start + chunk))
            ctx = {k: self.encoders[k[0]].forward(ds.inputs[k][sl]) for k in keys}
            out.append(self.coordinator.forward(ctx))
        return np.concatenate(out, axis=0)

    def targets(self, ds: WindowedDataset) -> np.ndarray:
        return np.stack([ds.targets[ic.interconnection_id] for ic in self.coordinator.interconnections], axis=1)

    def last_kpi(self, ds: WindowedDataset) -> np.ndarray:
        return np.stack([ds.last_kpi[ic.interconnection_id] for ic in self.coordinator.interconnections], axis=1)


def evaluate_run(cfg: RunConfig, tensors: Dict[str, np.ndarray], scaling: Scaling,
                 seeds: Sequence[int], duration_s: float, name: str = "") -> dict:
    """Pooled metrics over fresh-seed scenarios for the model and the persistence baseline."""
    model = CheckpointModel(tensors, cfg.model, cfg.topology)
    preds, truths, lasts = [], [], []
    for s in seeds:
        scen = generate_scenario(ScenarioConfig(duration_s=duration_s, n_tod_ues=cfg.n_ues, seed=int(s)))
        ds = scaled_windows(worker_tables(scen, cfg.topology), cfg.topology, scaling)
        preds.append(model.predict(ds))
        truths.append(model.targets(ds))
        lasts.append(model.last_kpi(ds))
    pred, truth, last = (np.concatenate(a) for a in (preds, truths, lasts))
    scen_id = ",".join(str(s) for s in seeds)
    ours = compute_mae(pred, truth, scaling.kpi, scenario=scen_id, model=name or "distinqt")
    base = compute_mae(persistence_baseline(last, truth.shape[-1]), truth, scaling.kpi,
                       scenario=scen_id, model="persistence")
    return {"model": ours, "persistence": base,
            "improvement": 1.0 - ours.overall_mae / base.overall_mae if base.overall_mae > 0 else 0.0}


def summary_rows(named: Dict[str, MetricsReport]) -> List[dict]:
    return [{"name": n, "overall_mae": r.overall_mae, "overall_std": r.overall_std,
             "last_step_mae": r.last_step_mae, "last_step_std": r.last_step_std, "n_windows": r.n_windows}
            for n, r in named.items()]


def write_summary_csv(path: Path, rows: Sequence[dict]) -> None:
    cols = ["name", "overall_mae", "overall_std", "last_step_mae", "last_step_std", "n_windows"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
