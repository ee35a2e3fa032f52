"""Synchronized split training with per-batch federated averaging.

One batch loop, with ``K = sum_e K_e`` participating workers and ``K_c`` of
them in the coordinator NET:

=============  ===========================  ================
message        route                        count per loop
=============  ===========================  ================
control/plan   coordinator -> worker        K - K_c
context_batch  worker -> coordinator        K - K_c
slice_grad     coordinator -> worker        K - K_c
weight_report  worker -> aggregator(e)      K
global_weights aggregator(e) -> worker      K
control/synced worker -> coordinator        K
=============  ===========================  ================

Coordinator-NET workers share the coordinator's process; their encode and
slice-gradient steps are direct calls (the "local shortcut"). Each NET's
aggregator is a logical actor co-located with its lowest-id worker. Raw
windows never leave the worker that owns them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import WindowedDataset
from .model import (
    CentralizedModel, CoordinatorModel, Encoder, ModelConfig, build_encoder,
)
from .numcore import Adam, mse_loss
from .topology import (
    Interconnection, Topology, WorkerDescriptor, assign_roles, ensure_valid, idle_workers,
)
from .transport import (
    COORDINATOR, Bus, Endpoint, Envelope, HubBus, StreamBus, aggregator_endpoint, worker_endpoint,
)

log = logging.getLogger(__name__)

WorkerKey = Tuple[int, int]
WeightSet = Dict[str, np.ndarray]

PHASES = ("collect_contexts", "merged_forward", "loss_backward", "grad_broadcast",
          "weight_report", "aggregate", "global_broadcast")
(P_COLLECT, P_MERGE, P_LOSS, P_GRAD, P_REPORT, P_AGG, P_GLOBAL) = range(len(PHASES))

SHUFFLE_TAG = 3
MODES = ("deterministic", "threaded", "stream", "hub")


class ProtocolError(RuntimeError):
    pass


class BarrierTimeout(ProtocolError):
    pass


# ---------------------------------------------------------------- plans

@dataclass
class BatchPlan:
    epoch: int
    batch: int
    indices: np.ndarray
    split: str = "train"
    train: bool = True

    @property
    def size(self) -> int:
        return len(self.indices)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled sample order, shared by every worker through the plan."""
    return np.random.default_rng(np.random.SeedSequence([seed, SHUFFLE_TAG, epoch])).permutation(n)


def batch_plans(n: int, batch_size: int, seed: int, epoch: int) -> List[BatchPlan]:
    order = epoch_order(n, seed, epoch)
    return [BatchPlan(epoch, b, order[i:i + batch_size])
            for b, i in enumerate(range(0, n, batch_size))]


# ---------------------------------------------------------------- state

class RoundState:
    """Ordered trace of (epoch, batch, phase, actor, net) events across all actors."""

    def __init__(self):
        self._lock = threading.Lock()
        self.trace: List[Tuple[int, int, str, str, int]] = []

    def enter(self, epoch: int, batch: int, phase: int, actor: str, net: int = 0) -> None:
        with self._lock:
            self.trace.append((epoch, batch, PHASES[phase], actor, net))

    def events(self, epoch: int, batch: int) -> List[Tuple[str, str]]:
        return [(p, a) for e, b, p, a, _ in self.trace if (e, b) == (epoch, batch)]

    def phase_order_ok(self, epoch: int, batch: int) -> bool:
        """Check the barriers of one batch loop against the trace.

        Phases never go backwards within an actor; the merge follows every
        encode; no worker applies its slice gradient before the coordinator's
        loss backward; each NET aggregates only after all its reports.
        """
        ev = [(i, p, a, n) for i, (e, b, p, a, n) in enumerate(self.trace) if (e, b) == (epoch, batch)]
        last: Dict[str, int] = {}
        for _, p, a, _ in ev:
            if PHASES.index(p) < last.get(a, -1):
                return False
            last[a] = PHASES.index(p)

        def at(phase, actor=None, net=None):
            return [i for i, p, a, n in ev if p == phase and (actor is None or a == actor)
                    and (net is None or n == net)]
        merges, losses = at("merged_forward", "coordinator"), at("loss_backward", "coordinator")
        if not merges or max(at("collect_contexts"), default=-1) > merges[0]:
            return False
        grads = at("grad_broadcast")
        if grads and (not losses or min(grads) < losses[0]):
            return False
        for i, p, a, n in ev:
            if p == "aggregate" and max(at("weight_report", net=n), default=-1) > i:
                return False
        return True


def aggregate_weights(weight_sets: Sequence[WeightSet]) -> WeightSet:
    """Elementwise mean, summed in the given (ascending worker id) order."""
    if not weight_sets:
        raise ValueError("cannot aggregate an empty list of weight sets")
    names = set(weight_sets[0])
    for ws in weight_sets[1:]:
        if set(ws) != names:
            raise ValueError("weight sets have different parameter names")
        for k in names:
            if ws[k].shape != weight_sets[0][k].shape:
                raise ValueError(f"shape mismatch for {k}")
    # w_1 + sum_k (w_k - w_1) / K equals sum_k w_k / K and is exact when all sets agree
    out = {}
    for k in sorted(names):
        base = np.asarray(weight_sets[0][k], dtype=np.float64)
        acc = np.zeros_like(base)
        for ws in weight_sets[1:]:
            acc += ws[k] - base
        out[k] = base + acc / len(weight_sets)
    return out


def weights_checksum(weights: WeightSet) -> str:
    h = hashlib.sha256()
    for k in sorted(weights):
        h.update(k.encode("utf-8"))
        h.update(np.ascontiguousarray(weights[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class GlobalEncoderStore:
    """Latest aggregated encoder weights per NET with the batch that produced them."""

    weights: Dict[int, WeightSet] = field(default_factory=dict)
    stamps: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def update(self, net_id: int, weights: WeightSet, stamp: Tuple[int, int]) -> None:
        with self._lock:
            self.weights[net_id] = {k: v.copy() for k, v in weights.items()}
            self.stamps[net_id] = stamp

    def latest(self, net_id: int) -> WeightSet:
        with self._lock:
            if net_id not in self.weights:
                raise KeyError(f"unknown NET {net_id}")
            return {k: v.copy() for k, v in self.weights[net_id].items()}

    def checksums(self) -> Dict[int, str]:
        with self._lock:
            return {e: weights_checksum(w) for e, w in sorted(self.weights.items())}


@dataclass
class EarlyStopState:
    patience: int = 10
    max_epochs: int = 1000
    min_delta: float = 0.0
    best: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    epochs_seen: int = 0
    stopped: bool = False

    def update(self, val_mse: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        improved = val_mse < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch, self.bad_epochs = val_mse, self.epochs_seen, 0
        else:
            self.bad_epochs += 1
        self.epochs_seen += 1
        self.stopped = self.bad_epochs >= self.patience or self.epochs_seen >= self.max_epochs
        return self.stopped

    @property
    def improved_last(self) -> bool:
        return self.best_epoch == self.epochs_seen - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d


# ---------------------------------------------------------------- actors

def _weights_payload(weights: WeightSet) -> Dict[str, np.ndarray]:
    return {f"weight/{k}": v for k, v in sorted(weights.items())}


def _payload_weights(payload: Dict[str, np.ndarray]) -> WeightSet:
    return {k.split("/", 1)[1]: v for k, v in payload.items()}


class WorkerActor:
    """Holds one encoder, its optimizer and its private windows per split."""

    def __init__(self, net_id: int, worker_id: int, encoder: Encoder, lr: float,
                 splits: Dict[str, np.ndarray], round_state: Optional[RoundState] = None):
        self.net_id, self.worker_id = net_id, worker_id
        self.endpoint = worker_endpoint(net_id, worker_id)
        self.aggregator = aggregator_endpoint(net_id)
        self.encoder = encoder
        self.optimizer = Adam(lr=lr)
        self.splits = splits
        self.round_state = round_state or RoundState()
        self.bus = None

    @property
    def key(self) -> WorkerKey:
        return (self.net_id, self.worker_id)

    @property
    def name(self) -> str:
        return f"worker{self.net_id}.{self.worker_id}"

    def encode(self, split: str, indices, epoch: int = -1, batch: int = -1) -> np.ndarray:
        self.round_state.enter(epoch, batch, P_COLLECT, self.name, self.net_id)
        return self.encoder.forward(self.splits[split][np.asarray(indices, dtype=int)])

    def apply_gradient(self, epoch: int, batch: int, dctx: np.ndarray) -> None:
        self.round_state.enter(epoch, batch, P_GRAD, self.name, self.net_id)
        self.encoder.backward(dctx)
        self.optimizer.step(self.encoder.params, self.encoder.grads)

    def report(self, epoch: int, batch: int) -> None:
        self.round_state.enter(epoch, batch, P_REPORT, self.name, self.net_id)
        self.bus.send(Envelope("weight_report", epoch, batch, P_REPORT, self.endpoint, self.aggregator,
                               _weights_payload(self.encoder.get_weights())))

    def handle(self, env: Envelope) -> bool:
        """Process one message; returns False when told to stop."""
        if env.msg_type == "control":
            cmd = env.meta.get("cmd")
            if cmd == "stop":
                return False
            if cmd != "plan":
                raise ProtocolError(f"{self.name}: unknown control {cmd!r}")
            ctx = self.encode(env.meta["split"], env.meta["idx"], env.epoch, env.batch)
            self.bus.send(Envelope("context_batch", env.epoch, env.batch, P_COLLECT, self.endpoint,
                                   COORDINATOR, {"context/v": ctx}))
        elif env.msg_type == "slice_grad":
            self.apply_gradient(env.epoch, env.batch, env.payload["grad/v"])
            self.report(env.epoch, env.batch)
        elif env.msg_type == "global_weights":
            self.encoder.set_weights(_payload_weights(env.payload))
            self.bus.send(Envelope("control", env.epoch, env.batch, P_GLOBAL, self.endpoint,
                                   COORDINATOR, meta={"cmd": "synced"}))
        else:
            raise ProtocolError(f"{self.name}: unexpected {env.msg_type}")
        return True


class AggregatorActor:
    """Local NET aggregator: averages the members' reports and broadcasts the result."""

    def __init__(self, net_id: int, members: Sequence[int], store: GlobalEncoderStore,
                 round_state: RoundState):
        self.net_id = net_id
        self.members = sorted(members)
        self.store = store
        self.round_state = round_state
        self.endpoint = aggregator_endpoint(net_id)
        self.bus = None
        self._reports: Dict[int, WeightSet] = {}
        self._batch: Optional[Tuple[int, int]] = None
        self.last_reports: Dict[int, WeightSet] = {}  # inputs of the latest aggregation

    @property
    def name(self) -> str:
        return f"aggregator{self.net_id}"

    def add_member(self, worker_id: int) -> None:
        if self._reports:
            raise ProtocolError("membership can only change between batch loops")
        self.members = sorted(set(self.members) | {worker_id})

    def handle(self, env: Envelope) -> bool:
        if env.msg_type == "control" and env.meta.get("cmd") == "stop":
            return False
        if env.msg_type != "weight_report":
            raise ProtocolError(f"{self.name}: unexpected {env.msg_type}")
        stamp = (env.epoch, env.batch)
        if self._batch is not None and self._batch != stamp:
            raise ProtocolError(f"{self.name}: report for {stamp} while collecting {self._batch}")
        self._batch = stamp
        self._reports[env.sender[2]] = _payload_weights(env.payload)
        if len(self._reports) < len(self.members):
            return True
        self.round_state.enter(*stamp, P_AGG, self.name, self.net_id)
        agg = aggregate_weights([self._reports[k] for k in self.members])
        self.store.update(self.net_id, agg, stamp)
        self.round_state.enter(*stamp, P_GLOBAL, self.name, self.net_id)
        for k in self.members:
            self.bus.send(Envelope("global_weights", env.epoch, env.batch, P_GLOBAL, self.endpoint,
                                   worker_endpoint(self.net_id, k), _weights_payload(agg)))
        self.last_reports, self._reports, self._batch = self._reports, {}, None
        return True


class CoordinatorActor:
    """Merging layer, decoder, head and loss; drives each batch loop."""

    def __init__(self, model: CoordinatorModel, lr: float, targets: Dict[str, Dict[int, np.ndarray]],
                 coordinator_net: int, round_state: RoundState):
        self.model = model
        self.optimizer = Adam(lr=lr)
        self.targets = targets  # split -> interconnection id -> [n, p]
        self.net_id = coordinator_net
        self.round_state = round_state
        self.endpoint = COORDINATOR
        self.bus = None
        self.local: Dict[WorkerKey, WorkerActor] = {}
        self.remote: List[WorkerKey] = []
        self.done = threading.Event()
        self.error: Optional[BaseException] = None
        self.plan: Optional[BatchPlan] = None
        self.loss: Optional[float] = None
        self.predictions: Optional[np.ndarray] = None
        self._contexts: Dict[WorkerKey, np.ndarray] = {}
        self._synced: set = set()
        self._step_lock = threading.Lock()
        self._stepped = False

    @property
    def participants(self) -> List[WorkerKey]:
        keys = {m for ic in self.model.interconnections for m in ic.members}
        return sorted(keys)

    def begin(self, plan: BatchPlan) -> None:
        self.plan, self.loss, self.predictions = plan, None, None
        self._contexts, self._synced, self._stepped = {}, set(), False
        self.done.clear()
        e, b = plan.epoch, plan.batch
        self.round_state.enter(e, b, P_COLLECT, "coordinator")
        for key in self.participants:
            if key in self.local:
                self._contexts[key] = self.local[key].encode(plan.split, plan.indices, e, b)
        meta = {"cmd": "plan", "split": plan.split, "idx": [int(i) for i in plan.indices]}
        for key in self.participants:
            if key not in self.local:
                self.bus.send(Envelope("control", e, b, P_COLLECT, self.endpoint, worker_endpoint(*key),
                                       meta=dict(meta)))
        self._maybe_step()

    def handle(self, env: Envelope) -> bool:
        if env.msg_type == "control" and env.meta.get("cmd") == "stop":
            return False
        plan = self.plan
        if plan is None or (env.epoch, env.batch) != (plan.epoch, plan.batch):
            raise ProtocolError(f"coordinator: {env.msg_type} for ({env.epoch}, {env.batch}) outside the current loop")
        key = (env.sender[1], env.sender[2])
        if env.msg_type == "context_batch":
            if key in self._contexts:
                raise ProtocolError(f"duplicate context from {key}")
            self._contexts[key] = env.payload["context/v"]
            self._maybe_step()
        elif env.msg_type == "control" and env.meta.get("cmd") == "synced":
            self._synced.add(key)
            if self._synced >= set(self.participants):
                self.done.set()
        else:
            raise ProtocolError(f"coordinator: unexpected {env.msg_type}")
        return True

    def _stacked_targets(self, split: str, idx) -> np.ndarray:
        t = self.targets[split]
        return np.stack([t[ic.interconnection_id][idx] for ic in self.model.interconnections], axis=1)

    def _maybe_step(self) -> None:
        # runs once per loop, from whichever context delivers the last context vector
        with self._step_lock:
            if self._stepped or set(self.participants) - set(self._contexts):
                return
            self._stepped = True
        plan = self.plan
        e, b = plan.epoch, plan.batch
        self.round_state.enter(e, b, P_MERGE, "coordinator")
        y = self.model.forward(self._contexts)
        if not plan.train:
            self.predictions = y
            self.done.set()
            return
        self.round_state.enter(e, b, P_LOSS, "coordinator")
        loss, dy = mse_loss(y, self._stacked_targets(plan.split, plan.indices))
        dctx = self.model.backward_partition(dy)
        self.optimizer.step(self.model.params, self.model.grads)
        self.loss = loss
        for key in self.participants:
            if key in self.local:
                self.local[key].apply_gradient(e, b, dctx[key])
        for key in self.participants:
            if key in self.local:
                self.local[key].report(e, b)
        for key in self.participants:
            if key not in self.local:
                self.bus.send(Envelope("slice_grad", e, b, P_GRAD, self.endpoint, worker_endpoint(*key),
                                       {"grad/v": dctx[key]}))


# ---------------------------------------------------------------- schedulers

class DeterministicScheduler:
    """Single execution context: deliveries in ``ordering_key`` order."""

    def __init__(self, bus: Bus, actors: Dict[Endpoint, object]):
        self.bus, self.actors = bus, actors

    def add(self, actor) -> None:
        self.actors[actor.endpoint] = actor

    def run_until(self, coordinator: CoordinatorActor, timeout: Optional[float] = None) -> None:
        while not coordinator.done.is_set():
            env = self.bus.next_delivery()
            if env is None:
                raise ProtocolError("batch loop stalled with no message in flight")
            self.actors[env.receiver].handle(env)

    def stop(self) -> None:
        pass


class ThreadedScheduler:
    """One thread per actor; actors meet only through the bus."""

    def __init__(self, bus: Bus, actors: Dict[Endpoint, object]):
        self.bus, self.actors = bus, actors
        self.threads: Dict[Endpoint, threading.Thread] = {}
        self.errors: List[BaseException] = []
        self._coordinator: Optional[CoordinatorActor] = None
        for actor in list(actors.values()):
            self._start(actor)

    def _start(self, actor) -> None:
        t = threading.Thread(target=self._loop, args=(actor,), daemon=True, name=str(actor.endpoint))
        self.threads[actor.endpoint] = t
        t.start()

    def add(self, actor) -> None:
        self.actors[actor.endpoint] = actor
        self._start(actor)

    def _loop(self, actor) -> None:
        try:
            while True:
                env = self.bus.recv(actor.endpoint)
                if not actor.handle(env):
                    return
        except EOFError:
            return
        except BaseException as exc:
            self.errors.append(exc)
            if self._coordinator is not None:
                self._coordinator.done.set()

    def run_until(self, coordinator: CoordinatorActor, timeout: Optional[float] = None) -> None:
        self._coordinator = coordinator
        if not coordinator.done.wait(timeout):
            raise BarrierTimeout(f"batch loop did not complete within {timeout}s")
        errors = list(self.errors) + list(getattr(self.bus, "errors", []))
        if errors:
            raise ProtocolError(f"actor failed: {errors[0]!r}") from errors[0]

    def stop(self) -> None:
        for ep in list(self.threads):
            try:
                self.bus.send(Envelope("control", -1, -1, 0, COORDINATOR, ep, meta={"cmd": "stop"}))
            except Exception:  # bus may already be closed
                pass
        for t in self.threads.values():
            t.join(timeout=5)


# ---------------------------------------------------------------- trainers

@dataclass
class TrainingResult:
    batch_losses: List[Tuple[int, int, float]] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    initial_val_mse: float = math.nan
    early_stop: EarlyStopState = field(default_factory=EarlyStopState)
    seconds: float = 0.0

    @property
    def best_val_mse(self) -> float:
        return self.early_stop.best

    def losses_by_epoch(self) -> Dict[int, List[float]]:
        out: Dict[int, List[float]] = {}
        for e, _, loss in self.batch_losses:
            out.setdefault(e, []).append(loss)
        return out


class _TrainingLoop:
    config: ModelConfig
    seed: int
    train_data: WindowedDataset
    topo: Topology

    def run_batch_loop(self, plan: BatchPlan) -> float:
        raise NotImplementedError

    def predict(self, split: str) -> np.ndarray:
        raise NotImplementedError

    def checksums(self) -> Dict[int, str]:
        raise NotImplementedError

    def checkpoint_tensors(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        raise NotImplementedError

    def split_targets(self, split: str) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, split: str = "val") -> float:
        return float(np.mean((self.predict(split) - self.split_targets(split)) ** 2))

    def fit(self, max_epochs: int = 1000, patience: int = 10, log_path: Optional[Path] = None,
            on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainingResult:
        t0 = time.perf_counter()
        es = EarlyStopState(patience=patience, max_epochs=max_epochs)
        result = TrainingResult(early_stop=es)
        result.initial_val_mse = self.evaluate("val")
        best = self.checkpoint_tensors()
        fh = open(log_path, "w") if log_path else None
        names = {n.net_id: n.name for n in self.topo.nets}
        try:
            for epoch in range(max_epochs):
                for plan in batch_plans(len(self.train_data), self.config.batch_size, self.seed, epoch):
                    loss = self.run_batch_loop(plan)
                    result.batch_losses.append((epoch, plan.batch, loss))
                    if fh:
                        fh.write(json.dumps({"kind": "batch", "epoch": epoch, "batch": plan.batch, "loss": loss,
                                             "checksums": {names[e]: c for e, c in self.checksums().items()}})
                                 + "\n")
                val = self.evaluate("val")
                result.val_mse.append(val)
                stop = es.update(val)
                if es.improved_last:
                    best = self.checkpoint_tensors()
                if fh:
                    fh.write(json.dumps({"kind": "epoch", "epoch": epoch, "val_mse": val,
                                         "early_stop": es.to_dict()}) + "\n")
                    fh.flush()
                log.info("epoch %d val_mse %.6g (best %.6g @ %d)", epoch, val, es.best, es.best_epoch)
                if on_epoch:
                    on_epoch(epoch, val)
                if stop:
                    break
        finally:
            if fh:
                fh.close()
        self.load_tensors(best)
        result.seconds = time.perf_counter() - t0
        return result


def _ordered_weights(prefix: str, weights: WeightSet) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.copy() for k, v in sorted(weights.items())}


class DistributedTrainer(_TrainingLoop):
    """Coordinator, aggregators and workers wired over one bus.

    ``mode``: ``deterministic`` (single context, ordered deliveries),
    ``threaded`` (one thread per actor), ``stream`` (threads, every message
    crosses a socket as a wire frame) or ``hub`` (threads; the workers listed
    in ``remote`` run in other processes and connect over TCP).
    """

    def __init__(self, topo: Topology, config: ModelConfig, train: WindowedDataset,
                 val: Optional[WindowedDataset] = None, seed: int = 0, mode: str = "deterministic",
                 remote: Sequence[WorkerKey] = (), hub_address: Tuple[str, int] = ("127.0.0.1", 0),
                 barrier_timeout: float = 600.0, eval_chunk: int = 512,
                 on_listen: Optional[Callable[[Tuple[str, int]], None]] = None):
        if mode not in MODES:
            raise ValueError(f"unknown scheduler mode {mode!r}")
        self.topo = ensure_valid(topo)
        self.roles = assign_roles(topo)
        self.config, self.seed, self.mode = config, seed, mode
        self.train_data, self.val_data = train, val if val is not None else train.subset([])
        self.barrier_timeout, self.eval_chunk = barrier_timeout, eval_chunk
        self.round_state = RoundState()
        self.store = GlobalEncoderStore()
        for key in idle_workers(topo):
            log.warning("worker %s takes no part in the batch loops", key)

        if mode == "deterministic":
            self.bus: Bus = Bus(deterministic=True)
        elif mode == "threaded":
            self.bus = Bus(deterministic=False)
        elif mode == "stream":
            self.bus = StreamBus()
        else:
            self.bus = HubBus(*hub_address)
            if on_listen:
                on_listen(self.bus.address)
        remote = {tuple(k) for k in remote}
        if remote and mode != "hub":
            raise ValueError("remote workers need the hub transport")

        c = topo.coordinator_net.net_id
        for e in topo.net_ids:
            self.store.update(e, build_encoder(config.encoder_spec(topo, e), seed, e).get_weights(), (0, -1))
        self.coordinator = CoordinatorActor(
            CoordinatorModel(config, topo, seed), config.lr,
            {"train": train.targets, "val": self.val_data.targets}, c, self.round_state)
        self.workers: Dict[WorkerKey, WorkerActor] = {}
        actors: Dict[Endpoint, object] = {COORDINATOR: self.coordinator}
        participants = set(self.coordinator.participants)
        self.aggregators: Dict[int, AggregatorActor] = {}
        for e in topo.net_ids:
            members = [w.worker_id for w in topo.workers_of(e) if w.key in participants]
            self.aggregators[e] = AggregatorActor(e, members, self.store, self.round_state)
            actors[self.aggregators[e].endpoint] = self.aggregators[e]
        for w in topo.workers:
            if w.key not in participants or w.key in remote:
                continue
            actor = self._make_worker(w.net_id, w.worker_id,
                                      {"train": train.inputs[w.key], "val": self.val_data.inputs[w.key]})
            if w.net_id == c:
                self.coordinator.local[w.key] = actor
            self.workers[w.key] = actor
            actors[actor.endpoint] = actor
        for actor in actors.values():
            self.bus.register(actor.endpoint)
            actor.bus = self.bus
        if remote:
            self.bus.wait_for([worker_endpoint(*k) for k in sorted(remote)], timeout=barrier_timeout)
        self.actors = actors
        self.scheduler = (DeterministicScheduler(self.bus, actors) if mode == "deterministic"
                          else ThreadedScheduler(self.bus, actors))

    def _make_worker(self, net_id: int, worker_id: int, splits: Dict[str, np.ndarray]) -> WorkerActor:
        enc = build_encoder(self.config.encoder_spec(self.topo, net_id), self.seed, net_id)
        enc.set_weights(self.store.latest(net_id))
        return WorkerActor(net_id, worker_id, enc, self.config.lr, splits, self.round_state)

    # -- batch loops

    def _run(self, plan: BatchPlan) -> None:
        self.coordinator.begin(plan)
        self.scheduler.run_until(self.coordinator, self.barrier_timeout)

    def run_batch_loop(self, plan: BatchPlan) -> float:
        self._run(plan)
        return self.coordinator.loss

    def predict(self, split: str = "val") -> np.ndarray:
        data = self.train_data if split == "train" else self.val_data
        n = len(data)
        preds = []
        for chunk, start in enumerate(range(0, n, self.eval_chunk)):
            idx = np.arange(start, min(n, start + self.eval_chunk))
            self._run(BatchPlan(self._eval_epoch, -(chunk + 1), idx, split, train=False))
            preds.append(self.coordinator.predictions)
        self._eval_epoch += 1
        if not preds:
            return np.zeros((0, len(self.coordinator.model.interconnections), self.topo.timing.horizon_steps))
        return np.concatenate(preds, axis=0)

    _eval_epoch = 10**6  # eval traffic is stamped outside the training epoch range

    def split_targets(self, split: str) -> np.ndarray:
        data = self.train_data if split == "train" else self.val_data
        return np.stack([data.targets[ic.interconnection_id] for ic in self.coordinator.model.interconnections],
                        axis=1)

    # -- membership

    def join(self, worker: WorkerDescriptor, splits: Dict[str, np.ndarray],
             interconnection: Optional[Interconnection] = None) -> WorkerActor:
        """Provision a new worker with the store's current weights; it enters the next batch loop."""
        if worker.net_id not in self.topo.net_ids:
            raise KeyError(f"unknown NET {worker.net_id}")
        if worker.key in self.workers:
            raise ValueError(f"worker {worker.key} already present")
        self.topo = self.topo.with_worker(worker, interconnection)
        if interconnection is not None:
            self.coordinator.model.add_interconnection(interconnection)
        actor = self._make_worker(worker.net_id, worker.worker_id, splits)
        self.workers[worker.key] = actor
        if worker.key in set(self.coordinator.participants):
            self.aggregators[worker.net_id].add_member(worker.worker_id)
        if worker.net_id == self.topo.coordinator_net.net_id:
            self.coordinator.local[worker.key] = actor
        self.bus.register(actor.endpoint)
        actor.bus = self.bus
        self.scheduler.add(actor)
        return actor

    # -- state

    def encoders_of(self, net_id: int) -> List[Encoder]:
        return [a.encoder for k, a in sorted(self.workers.items()) if k[0] == net_id]

    def checksums(self) -> Dict[int, str]:
        return self.store.checksums()

    def checkpoint_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for e in self.topo.net_ids:
            out.update(_ordered_weights(f"enc{e}.", self.store.latest(e)))
        out.update(_ordered_weights("coord.", self.coordinator.model.params))
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for e in self.topo.net_ids:
            w = {k[len(f"enc{e}."):]: v for k, v in tensors.items() if k.startswith(f"enc{e}.")}
            self.store.update(e, w, self.store.stamps.get(e, (0, -1)))
            for actor in self.workers.values():
                if actor.net_id == e:
                    actor.encoder.set_weights(w)
        for k, v in self.coordinator.model.params.items():
            v[...] = tensors[f"coord.{k}"]

    def close(self) -> None:
        self.scheduler.stop()
        if isinstance(self.bus, HubBus):
            for ep in list(self.bus._remote):
                self.bus.send(Envelope("control", -1, -1, 0, COORDINATOR, ep, meta={"cmd": "stop"}))
        self.bus.close()


class CentralizedTrainer(_TrainingLoop):
    """The monolithic oracle: one process, one optimizer, same seeds and batches."""

    def __init__(self, topo: Topology, config: ModelConfig, train: WindowedDataset,
                 val: Optional[WindowedDataset] = None, seed: int = 0, eval_chunk: int = 512):
        self.topo = ensure_valid(topo)
        self.config, self.seed = config, seed
        self.train_data, self.val_data = train, val if val is not None else train.subset([])
        self.model = CentralizedModel(config, topo, seed)
        self.eval_chunk = eval_chunk

    def _data(self, split: str) -> WindowedDataset:
        return self.train_data if split == "train" else self.val_data

    def run_batch_loop(self, plan: BatchPlan) -> float:
        d = self._data(plan.split)
        windows = {k: d.inputs[k][plan.indices] for k in self.model.keys}
        return self.model.train_step(windows, self.split_targets(plan.split)[plan.indices])

    def predict(self, split: str = "val") -> np.ndarray:
        d = self._data(split)
        out = []
        for start in range(0, len(d), self.eval_chunk):
            idx = np.arange(start, min(len(d), start + self.eval_chunk))
            out.append(self.model.forward({k: d.inputs[k][idx] for k in self.model.keys}))
        if not out:
            return np.zeros((0, len(self.model.coordinator.interconnections), self.topo.timing.horizon_steps))
        return np.concatenate(out, axis=0)

    def split_targets(self, split: str) -> np.ndarray:
        d = self._data(split)
        return np.stack([d.targets[ic.interconnection_id] for ic in self.model.coordinator.interconnections], axis=1)

    def checksums(self) -> Dict[int, str]:
        return {e: weights_checksum(self.model.encoders[(e, w)].params) for e, w in self.model.keys}

    def checkpoint_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for e, w in self.model.keys:
            out.update(_ordered_weights(f"enc{e}.", self.model.encoders[(e, w)].params))
        out.update(_ordered_weights("coord.", self.model.coordinator.params))
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, v in self.model.params.items():
            v[...] = tensors[name]

    def close(self) -> None:
        pass


def make_trainer(topo: Topology, config: ModelConfig, train: WindowedDataset, val: WindowedDataset,
                 seed: int = 0, centralized: bool = False, mode: str = "deterministic", **kw) -> _TrainingLoop:
    if centralized:
        return CentralizedTrainer(topo, config, train, val, seed)
    return DistributedTrainer(topo, config, train, val, seed, mode, **kw)


def run_training(topo: Topology, config: ModelConfig, train: WindowedDataset, val: WindowedDataset,
                 seed: int = 0, centralized: bool = False, mode: str = "deterministic",
                 max_epochs: int = 1000, patience: int = 10, log_path: Optional[Path] = None,
                 **kw) -> Tuple[Dict[str, np.ndarray], TrainingResult]:
    """Train to early stop; returns the best checkpoint tensors and the history."""
    trainer = make_trainer(topo, config, train, val, seed, centralized, mode, **kw)
    try:
        result = trainer.fit(max_epochs, patience, log_path)
        return trainer.checkpoint_tensors(), result
    finally:
        trainer.close()


def serve_worker(link, actor: WorkerActor) -> None:
    """Run one worker in a peer process until the hub says stop or disconnects."""
    actor.bus = link
    try:
        while True:
            env = link.recv()
            if not actor.handle(env):
                return
    except EOFError:
        return
    finally:
        link.close()
