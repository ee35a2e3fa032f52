"""Synthetic Tele-Operated-Driving scenario, min-max scaling and windowing.

The generator stands in for a network simulator. Its throughput is a noisy,
partly periodic function of the logged features so that a sequence model has
something to learn beyond persistence:

    throughput = clamp(20 - a*load - b/snr_margin - c*nbr_load + eps, 0, 20)  [Mbps]

with ``load`` the serving-BS utilisation in [0, 1] (background UEs modulated
by a periodic duty cycle), ``snr_margin = max(sinr_db + 5, 1) / 10`` and
``eps ~ N(0, noise_std)``.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .topology import MEC_FEATURES, TOD_UE_FEATURES, Topology, bs_features

log = logging.getLogger(__name__)

WorkerKey = Tuple[int, int]

THROUGHPUT_CAP_MBPS = 20.0
METERS_PER_DEG_LAT = 111_320.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 1200.0
    tau_ms: int = 200
    n_tod_ues: int = 5
    seed: int = 42
    future_horizon_ms: int = 20_000  # lead of the planned-route ("future location") feature
    area_m: float = 1000.0
    bs_height_m: float = 25.0
    max_speed_mps: float = 14.0
    bg_max: float = 100.0
    bg_step_std: float = 1.5
    bg_period_s: float = 4.0
    bg_mod_depth: float = 0.45
    load_coef: float = 8.0       # a
    snr_coef: float = 1.5        # b
    nbr_coef: float = 2.0        # c
    noise_std: float = 0.5
    sinr_noise_db: float = 1.0
    ref_lat: float = 48.1374
    ref_lon: float = 11.5755

    def __post_init__(self):
        if self.duration_s <= 0 or self.tau_ms <= 0 or self.n_tod_ues < 1:
            raise DataError("duration, logging period and UE count must be positive")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise DataError("seed must be a non-negative integer")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * 1000.0 / self.tau_ms))


@dataclass
class Table:
    """One worker's time series: ``data[T, F]`` on a ``tau_ms`` clock."""

    net: str
    worker_id: int
    columns: Tuple[str, ...]
    units: Tuple[str, ...]
    tau_ms: int
    data: np.ndarray
    seed: int = 0

    def col(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.columns.index(name)]
        except ValueError:
            raise KeyError(f"{self.net}/{self.worker_id} has no column {name!r}") from None

    def select(self, names: Sequence[str]) -> np.ndarray:
        idx = []
        for n in names:
            if n not in self.columns:
                raise KeyError(f"{self.net}/{self.worker_id} has no column {n!r}")
            idx.append(self.columns.index(n))
        return self.data[:, idx]

    def __len__(self) -> int:
        return self.data.shape[0]


Scenario = Dict[Tuple[str, int], Table]


def uplink_throughput(load_norm, snr_margin, noise=0.0, nbr_load_norm=0.0,
                      a: float = 8.0, b: float = 1.5, c: float = 2.0):
    """Throughput in Mbps; an infinite margin contributes no SINR penalty."""
    load_norm = np.asarray(load_norm, dtype=float)
    snr_margin = np.asarray(snr_margin, dtype=float)
    with np.errstate(divide="ignore"):
        snr_term = np.where(np.isinf(snr_margin), 0.0, 1.0 / snr_margin)
    raw = THROUGHPUT_CAP_MBPS - a * load_norm - b * snr_term - c * np.asarray(nbr_load_norm) + noise
    return np.clip(raw, 0.0, THROUGHPUT_CAP_MBPS)


def snr_margin_from_sinr(sinr_db):
    return np.maximum(np.asarray(sinr_db, dtype=float) + 5.0, 1.0) / 10.0


def _bounded_walk(rng, n, lo, hi, step_std, start=None):
    x = np.empty(n)
    x[0] = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo)) if start is None else start
    steps = rng.normal(0.0, step_std, size=n)
    for t in range(1, n):
        v = x[t - 1] + steps[t]
        # reflect at the bounds
        if v > hi:
            v = 2 * hi - v
        if v < lo:
            v = 2 * lo - v
        x[t] = min(max(v, lo), hi)
    return x


def _mobility(rng, n, dt, cfg: ScenarioConfig):
    """Smoothed random-waypoint track; returns positions [n, 2] (m) and speeds [n]."""
    pos = np.empty((n, 2))
    speed = np.empty(n)
    p = rng.uniform(0.1, 0.9, size=2) * cfg.area_m
    v = np.zeros(2)
    target_speed = rng.uniform(4.0, cfg.max_speed_mps)
    wp = rng.uniform(0.05, 0.95, size=2) * cfg.area_m
    for t in range(n):
        to_wp = wp - p
        dist = float(np.hypot(*to_wp))
        if dist < 15.0:
            wp = rng.uniform(0.05, 0.95, size=2) * cfg.area_m
            to_wp = wp - p
            dist = float(np.hypot(*to_wp))
        target_speed = float(np.clip(target_speed + rng.normal(0.0, 0.15), 1.0, cfg.max_speed_mps))
        desired = to_wp / max(dist, 1e-9) * target_speed
        v = 0.85 * v + 0.15 * desired
        s = float(np.hypot(*v))
        if s > cfg.max_speed_mps:
            v *= cfg.max_speed_mps / s
            s = cfg.max_speed_mps
        s = max(s, 0.05)  # speed lives in (0, max]
        p = p + v * dt
        pos[t] = p
        speed[t] = s
    return pos, speed


def _to_latlon(xy, cfg: ScenarioConfig):
    lat = cfg.ref_lat + (xy[:, 1] - cfg.area_m / 2) / METERS_PER_DEG_LAT
    lon = cfg.ref_lon + (xy[:, 0] - cfg.area_m / 2) / (METERS_PER_DEG_LAT * math.cos(math.radians(cfg.ref_lat)))
    return lat, lon


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Deterministic per ``cfg.seed``: tables for ``tod_ue`` workers 1..n, ``bs`` 1 and ``mec`` 1."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD15]))
    n = cfg.n_samples
    dt = cfg.tau_ms / 1000.0
    lead = int(round(cfg.future_horizon_ms / cfg.tau_ms))
    total = n + lead
    t_s = np.arange(n) * dt
    bs_xy = np.array([cfg.area_m / 2, cfg.area_m / 2])

    bg = _bounded_walk(rng, n, 0.0, cfg.bg_max, cfg.bg_step_std)
    phase = rng.uniform(0, 2 * np.pi)
    duty = 1.0 - cfg.bg_mod_depth + cfg.bg_mod_depth * np.sin(2 * np.pi * t_s / cfg.bg_period_s + phase)
    load_norm = np.clip(bg / cfg.bg_max * duty + 0.01 * cfg.n_tod_ues, 0.0, 1.0)
    nbr_loads = [_bounded_walk(rng, n, 0.0, 100.0, 1.0) for _ in range(2)]
    nbr_vehicles = [np.round(_bounded_walk(rng, n, 0.0, 100.0, 1.0)) for _ in range(2)]
    nbr_norm = (nbr_loads[0] + nbr_loads[1]) / 200.0

    tables: Scenario = {}
    sinrs, thrs = [], []
    for k in range(1, cfg.n_tod_ues + 1):
        xy, speed = _mobility(rng, total, dt, cfg)
        lat, lon = _to_latlon(xy, cfg)
        d = np.sqrt(np.sum((xy[:n] - bs_xy) ** 2, axis=1) + cfg.bs_height_m ** 2)
        ue = np.column_stack([lat[:n], lon[:n], speed[:n], d, lat[lead:lead + n], lon[lead:lead + n]])
        tables[("tod_ue", k)] = Table("tod_ue", k, TOD_UE_FEATURES,
                                      ("deg", "deg", "m/s", "m", "deg", "deg"), cfg.tau_ms, ue, cfg.seed)
        sinr_clean = 28.0 - 20.0 * np.log10(d / 100.0) - 8.0 * load_norm - 4.0 * nbr_norm
        sinr = sinr_clean + rng.normal(0.0, cfg.sinr_noise_db, size=n)
        thr = uplink_throughput(load_norm, snr_margin_from_sinr(sinr_clean),
                                rng.normal(0.0, cfg.noise_std, size=n), nbr_norm,
                                cfg.load_coef, cfg.snr_coef, cfg.nbr_coef)
        sinrs.append(sinr)
        thrs.append(thr)

    n_veh = cfg.n_tod_ues + np.round(bg)
    bs = np.column_stack([100.0 * load_norm, n_veh, *sinrs, *thrs])
    units = ("RB", "count") + ("dB",) * cfg.n_tod_ues + ("Mbps",) * cfg.n_tod_ues
    tables[("bs", 1)] = Table("bs", 1, bs_features(cfg.n_tod_ues), units, cfg.tau_ms, bs, cfg.seed)
    mec = np.column_stack([nbr_vehicles[0], nbr_vehicles[1], nbr_loads[0], nbr_loads[1]])
    tables[("mec", 1)] = Table("mec", 1, MEC_FEATURES, ("count", "count", "RB", "RB"), cfg.tau_ms, mec, cfg.seed)
    return tables


# ---------------------------------------------------------------- scaling

@dataclass
class Normalizer:
    columns: Tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    flagged: Tuple[str, ...] = ()

    @classmethod
    def fit(cls, data: np.ndarray, columns: Sequence[str]) -> "Normalizer":
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] == 0:
            raise DataError("cannot fit a normalizer on an empty split")
        lo, hi = data.min(axis=0), data.max(axis=0)
        flagged = tuple(c for c, a, b in zip(columns, lo, hi) if b <= a)
        if flagged:
            log.warning("constant features map to 0: %s", ", ".join(flagged))
        return cls(tuple(columns), lo, hi, flagged)

    def _span(self):
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0), span > 0

    def transform(self, x: np.ndarray) -> np.ndarray:
        span, live = self._span()
        out = np.where(live, (np.asarray(x, dtype=float) - self.lo) / span, 0.0)
        if np.any(out < 0) or np.any(out > 1):
            log.info("values outside the fitted range produce scaled values outside [0, 1]")
        return out

    def inverse(self, y: np.ndarray) -> np.ndarray:
        span, _ = self._span()
        return np.asarray(y, dtype=float) * span + self.lo

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "min": self.lo.tolist(), "max": self.hi.tolist(),
                "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["columns"]), np.array(d["min"], dtype=float), np.array(d["max"], dtype=float),
                   tuple(d.get("flagged", ())))


@dataclass
class KpiScale:
    """Shared min-max scale for every groundtruth column (targets are pooled)."""

    lo: float
    hi: float

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.lo) / (self.hi - self.lo if self.hi > self.lo else 1.0)

    def inverse(self, y):
        return np.asarray(y, dtype=float) * (self.hi - self.lo if self.hi > self.lo else 1.0) + self.lo


# ---------------------------------------------------------------- windows

@dataclass
class WindowedDataset:
    """Aligned samples: one history window per worker and one target per interconnection.

    ``inputs[(net, worker)]`` is ``[n, h_e, F_e]``; ``targets[a]`` is ``[n, p]``;
    ``last_kpi[a]`` is the groundtruth value observed at each anchor.
    """

    anchors_ms: np.ndarray
    inputs: Dict[WorkerKey, np.ndarray]
    targets: Dict[int, np.ndarray] = field(default_factory=dict)
    last_kpi: Dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.anchors_ms)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=int)
        return WindowedDataset(self.anchors_ms[idx],
                               {k: v[idx] for k, v in self.inputs.items()},
                               {k: v[idx] for k, v in self.targets.items()},
                               {k: v[idx] for k, v in self.last_kpi.items()})

    def stacked_targets(self, idx=None) -> np.ndarray:
        """``[n, A, p]`` with interconnections in ascending id order."""
        keys = sorted(self.targets)
        t = np.stack([self.targets[a] for a in keys], axis=1)
        return t if idx is None else t[idx]

    def stacked_last_kpi(self) -> np.ndarray:
        return np.stack([self.last_kpi[a] for a in sorted(self.last_kpi)], axis=1)


def anchor_times(topo: Topology, lengths: Dict[int, int], taus: Dict[int, int],
                 target_tau_ms: Optional[int] = None) -> np.ndarray:
    """Valid anchor times (ms) on the stride grid.

    ``lengths``/``taus`` are per NET. The first anchor is the earliest time at
    which every NET has a full history; the last leaves room for the horizon.
    """
    timing = topo.timing
    stride = timing.encode_step_ms
    first = 0
    for e in topo.net_ids:
        net = topo.net(e)
        tau = taus[e]
        if stride % tau:
            raise DataError(f"stride {stride} ms is not a multiple of NET {net.name} period {tau} ms")
        first = max(first, (net.history_steps - 1) * tau)
    for e in topo.net_ids:
        if first % taus[e]:
            raise DataError("first anchor does not fall on every NET's sampling grid")
    last = min((lengths[e] - 1) * taus[e] for e in topo.net_ids)
    c = topo.coordinator_net.net_id
    if timing.prediction_step_ms % (target_tau_ms or taus[c]):
        raise DataError("prediction step must be a multiple of the groundtruth logging period")
    last = min(last, (lengths[c] - 1) * taus[c] - timing.horizon_ms)
    if last < first:
        raise DataError("insufficient length for one history window plus the prediction horizon")
    return np.arange(first, last + 1, stride, dtype=np.int64)


def build_windows(tables: Dict[WorkerKey, Table], topo: Topology,
                  kpi: Optional[KpiScale] = None,
                  anchors_ms: Optional[np.ndarray] = None) -> WindowedDataset:
    """Slice aligned history windows and target sequences at every anchor.

    History for NET ``e`` covers samples ``(anchor - (h_e-1)*tau_e) .. anchor``;
    targets cover ``anchor + tau_c .. anchor + p*tau_c``.
    """
    if anchors_ms is None:
        lengths, taus = {}, {}
        for e in topo.net_ids:
            keys = [w.key for w in topo.workers_of(e) if w.key in tables]
            if not keys:
                raise DataError(f"no table for NET {topo.net(e).name}")
            lengths[e] = min(len(tables[k]) for k in keys)
            taus[e] = tables[keys[0]].tau_ms
        anchors_ms = anchor_times(topo, lengths, taus)
    anchors_ms = np.asarray(anchors_ms, dtype=np.int64)
    inputs = {}
    for w in topo.workers:
        if w.key not in tables:
            continue
        net = topo.net(w.net_id)
        tab = tables[w.key]
        feats = tab.select(net.features)
        end = anchors_ms // tab.tau_ms
        if np.any(end - net.history_steps + 1 < 0) or np.any(end >= len(tab)):
            raise DataError(f"insufficient length for worker {w.key}")
        idx = end[:, None] + np.arange(-net.history_steps + 1, 1)[None, :]
        inputs[w.key] = feats[idx]
    targets, last = {}, {}
    c = topo.coordinator_net.net_id
    p, step = topo.timing.horizon_steps, topo.timing.prediction_step_ms
    for ic in topo.interconnections:
        if ic.target is None:
            continue
        key = (c, ic.member_map[c])
        if key not in tables:
            continue
        tab = tables[key]
        col = tab.col(ic.target)
        tidx = (anchors_ms[:, None] + step * np.arange(1, p + 1)[None, :]) // tab.tau_ms
        if np.any(tidx >= len(tab)):
            raise DataError("insufficient length for the prediction horizon")
        y, y0 = col[tidx], col[anchors_ms // tab.tau_ms]
        if kpi is not None:
            y, y0 = kpi.transform(y), kpi.transform(y0)
        targets[ic.interconnection_id] = y
        last[ic.interconnection_id] = y0
    return WindowedDataset(anchors_ms, inputs, targets, last)


def window_count(duration_s: float, history_s: float, horizon_s: float, stride_s: float) -> int:
    return int(math.floor((duration_s - history_s - horizon_s) / stride_s)) + 1


def split_anchors(anchors_ms: np.ndarray, topo: Topology, val_fraction: float = 0.15):
    """Contiguous split: the last ``val_fraction`` of anchors validate.

    Training anchors whose target span reaches the first validation history
    row are purged, so no sample is shared across the boundary.
    """
    n = len(anchors_ms)
    n_val = int(math.ceil(val_fraction * n)) if val_fraction > 0 else 0
    val_idx = np.arange(n - n_val, n)
    if n_val == 0:
        return np.arange(n), val_idx
    hist = max((topo.net(e).history_steps - 1) * topo.net(e).logging_period_ms for e in topo.net_ids)
    val_start = anchors_ms[val_idx[0]] - hist
    train_idx = np.nonzero(anchors_ms[: n - n_val] + topo.timing.horizon_ms < val_start)[0]
    if len(train_idx) == 0:
        raise DataError("no training windows left after the validation split")
    return train_idx, val_idx


@dataclass
class Scaling:
    normalizers: Dict[WorkerKey, Normalizer]
    kpi: KpiScale

    def to_dict(self) -> dict:
        return {"workers": {f"{k[0]}:{k[1]}": v.to_dict() for k, v in self.normalizers.items()},
                "kpi": [self.kpi.lo, self.kpi.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaling":
        norms = {tuple(int(x) for x in k.split(":")): Normalizer.from_dict(v) for k, v in d["workers"].items()}
        return cls(norms, KpiScale(*d["kpi"]))


def worker_tables(scenario: Scenario, topo: Topology) -> Dict[WorkerKey, Table]:
    """Map scenario tables (keyed by NET name) onto topology worker keys."""
    out = {}
    for w in topo.workers:
        name = topo.net(w.net_id).name
        if (name, w.worker_id) in scenario:
            out[w.key] = scenario[(name, w.worker_id)]
    return out


def fit_scaling(tables: Dict[WorkerKey, Table], topo: Topology, fit_until_ms: Optional[int] = None,
                normalize: bool = True) -> Scaling:
    """Per-worker min-max on rows up to ``fit_until_ms`` plus a pooled KPI scale."""
    norms = {}
    for key, tab in tables.items():
        net = topo.net(key[0])
        rows = len(tab) if fit_until_ms is None else fit_until_ms // tab.tau_ms + 1
        feats = tab.select(net.features)[:rows]
        if normalize:
            norms[key] = Normalizer.fit(feats, net.features)
        else:
            norms[key] = Normalizer(net.features, np.zeros(len(net.features)), np.ones(len(net.features)))
    c = topo.coordinator_net.net_id
    vals = []
    for ic in topo.interconnections:
        key = (c, ic.member_map[c])
        if ic.target and key in tables:
            tab = tables[key]
            rows = len(tab) if fit_until_ms is None else fit_until_ms // tab.tau_ms + 1
            vals.append(tab.col(ic.target)[:rows])
    if not vals:
        raise DataError("no groundtruth columns available for the KPI scale")
    pooled = np.concatenate(vals)
    kpi = KpiScale(float(pooled.min()), float(pooled.max())) if normalize else KpiScale(0.0, 1.0)
    return Scaling(norms, kpi)


def apply_scaling(tables: Dict[WorkerKey, Table], topo: Topology, scaling: Scaling) -> Dict[WorkerKey, Table]:
    out = {}
    for key, tab in tables.items():
        net = topo.net(key[0])
        data = tab.data.copy()
        cols = [tab.columns.index(f) for f in net.features]
        data[:, cols] = scaling.normalizers[key].transform(tab.data[:, cols])
        out[key] = dataclasses.replace(tab, data=data)
    # groundtruth columns are read raw from the original table and scaled by the KPI scale
    return out


@dataclass
class PreparedData:
    train: WindowedDataset
    val: WindowedDataset
    scaling: Scaling


def prepare_training_data(scenario: Scenario, topo: Topology, val_fraction: float = 0.15,
                          normalize: bool = True) -> PreparedData:
    tables = worker_tables(scenario, topo)
    raw = build_windows(tables, topo)  # anchors only; cheap enough to recompute below
    train_idx, val_idx = split_anchors(raw.anchors_ms, topo, val_fraction)
    fit_until = int(raw.anchors_ms[train_idx[-1]] + topo.timing.horizon_ms)
    scaling = fit_scaling(tables, topo, fit_until, normalize)
    full = scaled_windows(tables, topo, scaling, raw.anchors_ms)
    return PreparedData(full.subset(train_idx), full.subset(val_idx), scaling)


def scaled_windows(tables: Dict[WorkerKey, Table], topo: Topology, scaling: Scaling,
                   anchors_ms: Optional[np.ndarray] = None) -> WindowedDataset:
    scaled_inputs = build_windows(apply_scaling(tables, topo, scaling), topo, None, anchors_ms)
    targets = build_windows(tables, topo, scaling.kpi, scaled_inputs.anchors_ms)
    return WindowedDataset(scaled_inputs.anchors_ms, scaled_inputs.inputs, targets.targets, targets.last_kpi)


# ---------------------------------------------------------------- files

TABLE_MAGIC = b"DQTB"
TABLE_VERSION = 1


def write_table(path: Path, tab: Table) -> str:
    header = json.dumps({"version": TABLE_VERSION, "net": tab.net, "worker": tab.worker_id,
                         "columns": list(tab.columns), "units": list(tab.units), "tau_ms": tab.tau_ms,
                         "seed": int(tab.seed), "n_rows": len(tab)}, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(tab.data.T, dtype="<f8").tobytes()  # column-major
    raw = TABLE_MAGIC + struct.pack(">I", len(header)) + header + body
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read_table(path: Path) -> Table:
    raw = Path(path).read_bytes()
    if raw[:4] != TABLE_MAGIC:
        raise DataError(f"{path} is not a table file")
    (hlen,) = struct.unpack(">I", raw[4:8])
    h = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if h["version"] != TABLE_VERSION:
        raise DataError(f"unsupported table version {h['version']}")
    n, f = h["n_rows"], len(h["columns"])
    body = raw[8 + hlen:]
    if len(body) != 8 * n * f:
        raise DataError(f"{path}: truncated payload")
    data = np.frombuffer(body, dtype="<f8").astype(float).reshape(f, n).T.copy()
    return Table(h["net"], h["worker"], tuple(h["columns"]), tuple(h["units"]), h["tau_ms"], data, h["seed"])


def write_csv(path: Path, tab: Table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{c} [{u}]" for c, u in zip(tab.columns, tab.units)])
        for row in tab.data:
            w.writerow([repr(float(v)) for v in row])


def save_scenario(root: Path, scenario: Scenario, cfg: ScenarioConfig, csv_export: bool = False) -> Path:
    root = Path(root)
    files = []
    for (net, k), tab in sorted(scenario.items()):
        rel = Path(net) / f"{k}.bin"
        digest = write_table(root / rel, tab)
        if csv_export:
            write_csv(root / net / f"{k}.csv", tab)
        files.append({"net": net, "worker": k, "path": rel.as_posix(), "sha256": digest})
    manifest = {"version": TABLE_VERSION, "config": dataclasses.asdict(cfg), "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root / "manifest.json"


def load_scenario(root: Path, only: Optional[Sequence[Tuple[str, int]]] = None) -> Tuple[Scenario, ScenarioConfig]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = ScenarioConfig(**manifest["config"])
    out: Scenario = {}
    for f in manifest["files"]:
        if only is not None and (f["net"], f["worker"]) not in only:
            continue
        raw = (root / f["path"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != f["sha256"]:
            raise DataError(f"checksum mismatch for {f['path']}")
        out[(f["net"], f["worker"])] = read_table(root / f["path"])
    return out, cfg
