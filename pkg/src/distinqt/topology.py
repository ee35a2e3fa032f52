"""NETs, workers, interconnections and the role rules that bind them."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

log = logging.getLogger(__name__)

ACTIVE, PASSIVE = "active", "passive"


class TopologyError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class NetDescriptor:
    net_id: int
    name: str
    role: str
    logging_period_ms: int
    history_steps: int
    features: Tuple[str, ...]
    encoder_kind: Optional[str] = None  # None defers to the model config
    encoder_units: Optional[int] = None
    is_coordinator: Optional[bool] = None  # None means "follows the active role"

    @property
    def history_ms(self) -> int:
        return self.history_steps * self.logging_period_ms

    @property
    def coordinator(self) -> bool:
        return self.role == ACTIVE if self.is_coordinator is None else self.is_coordinator


@dataclass(frozen=True)
class WorkerDescriptor:
    net_id: int
    worker_id: int
    partition: Optional[str] = None

    @property
    def key(self) -> Tuple[int, int]:
        return (self.net_id, self.worker_id)


@dataclass(frozen=True)
class Interconnection:
    interconnection_id: int
    members: Tuple[Tuple[int, int], ...]  # sorted (net_id, worker_id) pairs
    target: Optional[str] = None  # groundtruth column in the coordinator worker's table

    @classmethod
    def of(cls, interconnection_id: int, members: Dict[int, int], target: Optional[str] = None):
        return cls(interconnection_id, tuple(sorted(members.items())), target)

    @property
    def member_map(self) -> Dict[int, int]:
        return dict(self.members)


@dataclass(frozen=True)
class TimingPlan:
    encode_step_ms: int
    prediction_step_ms: int
    horizon_steps: int

    @property
    def horizon_ms(self) -> int:
        return self.horizon_steps * self.prediction_step_ms


@dataclass(frozen=True)
class Topology:
    nets: Tuple[NetDescriptor, ...]
    workers: Tuple[WorkerDescriptor, ...]
    interconnections: Tuple[Interconnection, ...]
    timing: TimingPlan

    def net(self, net_id: int) -> NetDescriptor:
        for n in self.nets:
            if n.net_id == net_id:
                return n
        raise KeyError(f"unknown NET {net_id}")

    def net_by_name(self, name: str) -> NetDescriptor:
        for n in self.nets:
            if n.name == name:
                return n
        raise KeyError(f"unknown NET {name!r}")

    @property
    def net_ids(self) -> List[int]:
        return sorted(n.net_id for n in self.nets)

    @property
    def coordinator_net(self) -> NetDescriptor:
        coords = [n for n in self.nets if n.coordinator]
        if len(coords) != 1:
            raise TopologyError([f"expected exactly one coordinator NET, found {len(coords)}"])
        return coords[0]

    def workers_of(self, net_id: int) -> List[WorkerDescriptor]:
        return sorted((w for w in self.workers if w.net_id == net_id), key=lambda w: w.worker_id)

    def worker_keys(self) -> List[Tuple[int, int]]:
        return sorted(w.key for w in self.workers)

    def k(self, net_id: int) -> int:
        return len(self.workers_of(net_id))

    @property
    def n_encoders(self) -> int:
        return len(self.workers)

    @property
    def n_merged(self) -> int:
        return len(self.interconnections)

    def with_worker(self, worker: WorkerDescriptor,
                    interconnection: Optional[Interconnection] = None) -> "Topology":
        ics = self.interconnections + ((interconnection,) if interconnection else ())
        return Topology(self.nets, self.workers + (worker,), ics, self.timing)


def validate_topology(topo: Topology) -> List[str]:
    """Every violated rule, as a list of messages; empty when valid."""
    errors: List[str] = []
    ids = [n.net_id for n in topo.nets]
    if not topo.nets:
        return ["no NETs declared"]
    if len(set(ids)) != len(ids):
        errors.append("duplicate NET ids")
    active = [n for n in topo.nets if n.role == ACTIVE]
    for n in topo.nets:
        if n.role not in (ACTIVE, PASSIVE):
            errors.append(f"NET {n.name}: unknown role {n.role!r}")
        if n.logging_period_ms <= 0 or n.history_steps <= 0:
            errors.append(f"NET {n.name}: logging period and history steps must be positive")
        if not n.features:
            errors.append(f"NET {n.name}: empty feature list")
        if n.encoder_kind not in (None, "bilstm", "lstm", "dense_stack"):
            errors.append(f"NET {n.name}: unknown encoder kind {n.encoder_kind!r}")
    if len(active) == 0:
        errors.append("no active NET")
    elif len(active) > 1:
        errors.append("multiple active NETs: " + ", ".join(n.name for n in active))
    coords = [n for n in topo.nets if n.coordinator]
    if len(coords) != 1:
        errors.append(f"expected exactly one coordinator NET, found {len(coords)}")
    elif active and coords[0].role != ACTIVE:
        errors.append(f"coordinator NET {coords[0].name} is not the active NET")

    t = topo.timing
    if t.prediction_step_ms <= 0 or t.horizon_steps <= 0 or t.encode_step_ms <= 0:
        errors.append("timing values must be positive")
    max_tau = max(n.logging_period_ms for n in topo.nets)
    if t.encode_step_ms < max_tau:
        errors.append(f"encode step below logging period: t={t.encode_step_ms} ms < max tau_e={max_tau} ms")

    worker_keys = [w.key for w in topo.workers]
    if len(set(worker_keys)) != len(worker_keys):
        errors.append("duplicate worker ids")
    for w in topo.workers:
        if w.net_id not in ids:
            errors.append(f"worker {w.key} belongs to unknown NET {w.net_id}")
    for n in topo.nets:
        if not any(w.net_id == n.net_id for w in topo.workers):
            errors.append(f"NET {n.name} has no workers")

    known = set(worker_keys)
    ic_ids = [ic.interconnection_id for ic in topo.interconnections]
    if len(set(ic_ids)) != len(ic_ids):
        errors.append("duplicate interconnection ids")
    if not topo.interconnections:
        errors.append("no interconnections declared")
    for ic in topo.interconnections:
        nets_in = [n for n, _ in ic.members]
        if len(set(nets_in)) != len(nets_in):
            errors.append(f"interconnection {ic.interconnection_id}: more than one worker of a NET")
        for n in ids:
            if n not in nets_in:
                errors.append(f"interconnection {ic.interconnection_id} missing NET {topo.net(n).name}")
        for key in ic.members:
            if key not in known:
                errors.append(f"interconnection {ic.interconnection_id}: dangling worker {key}")
    return errors


def idle_workers(topo: Topology) -> List[Tuple[int, int]]:
    """Workers that appear in no interconnection; they would receive no gradient signal."""
    used = {m for ic in topo.interconnections for m in ic.members}
    return [k for k in topo.worker_keys() if k not in used]


def ensure_valid(topo: Topology) -> Topology:
    errors = validate_topology(topo)
    if errors:
        raise TopologyError(errors)
    for key in idle_workers(topo):
        log.warning("worker %s is in no interconnection and will train on no gradient signal", key)
    return topo


@dataclass(frozen=True)
class NetRole:
    net_id: int
    name: str
    active: bool
    coordinator: bool
    aggregator: Tuple[int, int]  # worker hosting the Local NET Aggregator

    @property
    def passive(self) -> bool:
        return not self.active


@dataclass(frozen=True)
class RoleTable:
    roles: Tuple[NetRole, ...]
    coordinator: int
    n_merged: int = field(default=0)

    def __getitem__(self, net_id: int) -> NetRole:
        for r in self.roles:
            if r.net_id == net_id:
                return r
        raise KeyError(net_id)

    def by_name(self) -> Dict[str, NetRole]:
        return {r.name: r for r in self.roles}


def assign_roles(topo: Topology) -> RoleTable:
    ensure_valid(topo)
    roles = []
    for n in sorted(topo.nets, key=lambda n: n.net_id):
        first = topo.workers_of(n.net_id)[0]
        roles.append(NetRole(n.net_id, n.name, n.role == ACTIVE, n.coordinator, first.key))
    return RoleTable(tuple(roles), topo.coordinator_net.net_id, topo.n_merged)


# ----------------------------------------------------------------- presets

TOD_UE_FEATURES = ("lat", "lon", "speed_mps", "dist_bs_m", "future_lat", "future_lon")
MEC_FEATURES = ("nbr1_vehicles", "nbr2_vehicles", "nbr1_load_rb", "nbr2_load_rb")


def bs_features(n_ues: int) -> Tuple[str, ...]:
    return (("load_rb", "n_vehicles")
            + tuple(f"sinr_ue{k}" for k in range(1, n_ues + 1))
            + tuple(f"thr_ue{k}" for k in range(1, n_ues + 1)))


def tod_topology(n_ues: int = 5, with_mec: bool = False, history_steps: int = 125,
                 tau_ms: int = 200, encode_step_ms: int = 1000, prediction_step_ms: int = 200,
                 horizon_steps: int = 100) -> Topology:
    """ToD setup: UE x n, one BS (active, coordinator), optionally one MEC.

    Interconnection ``a`` joins UE worker ``a`` with the BS (and MEC) worker and
    predicts that UE's uplink throughput.
    """
    nets = [
        NetDescriptor(1, "tod_ue", PASSIVE, tau_ms, history_steps, TOD_UE_FEATURES),
        NetDescriptor(2, "bs", ACTIVE, tau_ms, history_steps, bs_features(n_ues)),
    ]
    if with_mec:
        nets.append(NetDescriptor(3, "mec", PASSIVE, tau_ms, history_steps, MEC_FEATURES))
    workers = [WorkerDescriptor(1, k) for k in range(1, n_ues + 1)]
    workers += [WorkerDescriptor(2, 1)]
    if with_mec:
        workers += [WorkerDescriptor(3, 1)]
    ics = []
    for k in range(1, n_ues + 1):
        members = {1: k, 2: 1}
        if with_mec:
            members[3] = 1
        ics.append(Interconnection.of(k, members, target=f"thr_ue{k}"))
    timing = TimingPlan(encode_step_ms, prediction_step_ms, horizon_steps)
    return Topology(tuple(nets), tuple(workers), tuple(ics), timing)


def figure3_topology() -> Topology:
    """UE x3, BS x2, MEC x1 with the MEC as active coordinator; three interconnections."""
    nets = (
        NetDescriptor(1, "ue", PASSIVE, 200, 5, ("f0", "f1")),
        NetDescriptor(2, "bs", PASSIVE, 200, 5, ("f0", "f1")),
        NetDescriptor(3, "mec", ACTIVE, 200, 5, ("f0", "f1")),
    )
    workers = tuple(WorkerDescriptor(1, k) for k in (1, 2, 3)) + (
        WorkerDescriptor(2, 1), WorkerDescriptor(2, 2), WorkerDescriptor(3, 1))
    ics = (
        Interconnection.of(1, {1: 1, 2: 1, 3: 1}, target="y1"),
        Interconnection.of(2, {1: 2, 2: 1, 3: 1}, target="y2"),
        Interconnection.of(3, {1: 3, 2: 2, 3: 1}, target="y3"),
    )
    return Topology(nets, workers, ics, TimingPlan(1000, 200, 3))
