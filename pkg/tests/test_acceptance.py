"""The nine acceptance criteria, one test each, at their stated tolerances.

Each test records PASS/FAIL plus wall time; conftest prints one line per
criterion in the terminal summary.
"""
import dataclasses
import functools
import time
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from fragments import ChainFragment, DecoderFragment, EncoderFragment, LayerFragment
from tiny import tiny_setup
from distinqt.evaluation import compute_mae, evaluate_run
from distinqt.config import parse_config
from distinqt.data import ScenarioConfig, generate_scenario, prepare_training_data
from distinqt.model import DecoderHeadSpec, EncoderSpec, ModelConfig, build_encoder
from distinqt.numcore import LSTM, BiLSTM, Dense, grad_check
from distinqt.privacy import AttackConfig, attack_window, reconstruct, similarity
from distinqt.protocol import (
    CentralizedTrainer, DistributedTrainer, aggregate_weights, batch_plans,
)
from distinqt.topology import WorkerDescriptor, tod_topology
from distinqt.transport import (
    RAW_KINDS, Envelope, aggregator_endpoint, decode_frame, encode_frame, worker_endpoint,
)

GOLDEN = Path(__file__).parent / "golden"
RESULTS = {}

# pinned from the first run of the default scenario (criterion 4)
PINNED_PERSISTENCE_MAE = 1.5982226145817726
# pinned many-to-one floor (criterion 7); first run gave pairwise distances 1.29 to 1.71
PINNED_ESTIMATE_FLOOR = 0.5


def criterion(number, title, budget_s):
    """Record the outcome and enforce the runtime budget."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - t0
                assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
            except BaseException:
                RESULTS[number] = ("FAIL", title, time.perf_counter() - t0)
                raise
            RESULTS[number] = ("PASS", title, elapsed)
        return run
    return wrap


def brute_mean(sets):
    out = {}
    for k in sets[0]:
        flat = [s[k].reshape(-1).tolist() for s in sets]
        out[k] = np.array([sum(f[i] for f in flat) / len(sets) for i in range(len(flat[0]))]).reshape(sets[0][k].shape)
    return out


@criterion(1, "gradient correctness", 60)
def test_criterion_1_gradients():
    rng = np.random.default_rng(13)
    checks = {
        "dense": LayerFragment(Dense(3, 4, activation="tanh", l2=0.1, rng=rng), rng.normal(size=(5, 3))),
        "lstm": LayerFragment(LSTM(2, 3, l2=0.05, rng=rng), rng.normal(size=(2, 6, 2))),
        "bilstm": LayerFragment(BiLSTM(2, 4, l2=0.05, rng=rng), rng.normal(size=(2, 6, 2))),
        "encoder": EncoderFragment(EncoderSpec("bilstm", 4, 2, 6, l2=0.01, activation="tanh"), seed=13),
        "decoder_head": DecoderFragment(5, DecoderHeadSpec(3, ((4, "tanh"), (1, "identity")), 4), 0.01, seed=13),
        "head_only": DecoderFragment(5, DecoderHeadSpec(2, ((1, "identity"),), 3), 0.01, seed=14),
    }
    topo = tod_topology(n_ues=2, with_mec=True, history_steps=4, horizon_steps=3)
    cfg = ModelConfig(encoder_units=2, decoder_units=3, head_units=(4,), l2=0.01, activation="tanh",
                      output_activation="identity")
    checks["chain"] = ChainFragment(topo, cfg, seed=13)
    errors = {name: grad_check(frag, seed=13, h=1e-5) for name, frag in checks.items()}
    bad = {k: v for k, v in errors.items() if not v < 1e-5}
    assert not bad, f"relative error >= 1e-5: {bad}"


@criterion(2, "aggregation exactness", 60)
def test_criterion_2_aggregation():
    rng = np.random.default_rng(21)
    for K in (2, 3, 5, 8):
        sets = [{"W": rng.normal(size=(3, 4)), "U": rng.normal(size=(2, 2)), "b": rng.normal(size=4)}
                for _ in range(K)]
        agg, ref = aggregate_weights(sets), brute_mean(sets)
        for k in ref:
            npt.assert_allclose(agg[k], ref[k], atol=1e-15, rtol=0)
    w = {"W": rng.normal(size=(4, 4))}
    for K in (1, 2, 7):
        assert aggregate_weights([w] * K)["W"].tobytes() == w["W"].tobytes()

    topo, cfg, prep = tiny_setup(n_ues=3, with_mec=True)
    tr = DistributedTrainer(topo, cfg, prep.train, prep.val, seed=5)
    try:
        for plan in batch_plans(len(prep.train), cfg.batch_size, 5, 0):
            tr.run_batch_loop(plan)
            for e in topo.net_ids:
                store = tr.store.latest(e)
                for enc in tr.encoders_of(e):
                    for k, v in enc.params.items():
                        assert v.tobytes() == store[k].tobytes()
    finally:
        tr.close()


@criterion(3, "centralized equivalence", 300)
def test_criterion_3_centralized_equivalence():
    topo, cfg, prep = tiny_setup(n_ues=1, with_mec=True)
    dist = DistributedTrainer(topo, cfg, prep.train, prep.val, seed=11, mode="deterministic")
    mono = CentralizedTrainer(topo, cfg, prep.train, prep.val, seed=11)
    try:
        worst, n = 0.0, 0
        for epoch in range(5):
            for plan in batch_plans(len(prep.train), cfg.batch_size, 11, epoch):
                worst = max(worst, abs(dist.run_batch_loop(plan) - mono.run_batch_loop(plan)))
                n += 1
            assert abs(dist.evaluate("val") - mono.evaluate("val")) <= 1e-9
        assert n > 5 and worst <= 1e-9, f"max per-batch loss gap {worst:.3g}"
    finally:
        dist.close()


def _default_run_config():
    return parse_config({
        "version": 1,
        "topology": {"preset": "tod", "n_ues": 5, "history_steps": 25, "horizon_steps": 10},
        "model": {"preset": "c1", "encoder_units": 16, "decoder_units": 16, "head_units": [16], "batch_size": 16},
        "training": {"max_epochs": 60, "patience": 5, "seed": 42},
        "data": {"seed": 42},
    })


@criterion(4, "learning works", 600)
def test_criterion_4_learning():
    cfg = _default_run_config()
    scen = generate_scenario(ScenarioConfig(seed=42, n_tod_ues=5))
    prep = prepare_training_data(scen, cfg.topology)
    tr = DistributedTrainer(cfg.topology, cfg.model, prep.train, prep.val, seed=42)
    try:
        result = tr.fit(cfg.training.max_epochs, cfg.training.patience)
        tensors = tr.checkpoint_tensors()
    finally:
        tr.close()
    assert result.best_val_mse <= 0.5 * result.val_mse[0], (result.val_mse[0], result.best_val_mse)
    res = evaluate_run(cfg, tensors, prep.scaling, cfg.data.eval_seeds, cfg.data.eval_duration_s)
    assert res["persistence"].overall_mae == pytest.approx(PINNED_PERSISTENCE_MAE, rel=1e-9)
    assert res["model"].overall_mae <= 0.8 * res["persistence"].overall_mae, res["improvement"]


@criterion(5, "protocol accounting", 120)
def test_criterion_5_accounting():
    topo, cfg, prep = tiny_setup(n_ues=3, with_mec=True)
    tr = DistributedTrainer(topo, cfg, prep.train, prep.val, seed=5)
    tr.bus.strict_audit = False  # record, do not raise, so the audit sees every message
    try:
        tr.fit(max_epochs=2, patience=5)
        K = sum(topo.k(e) for e in topo.net_ids)
        K_c = topo.k(topo.coordinator_net.net_id)  # the coordinator's own workers skip the wire
        train_batches = [(e, b) for (e, b) in tr.bus.batch_counts if b >= 0 and e < 10**6]
        assert len(train_batches) == 2 * len(batch_plans(len(prep.train), cfg.batch_size, 5, 0))
        for key in train_batches:
            c = tr.bus.batch_counts[key]
            assert c["context_batch"] == K - K_c
            assert c["slice_grad"] == K - K_c
            assert c["weight_report"] == K
            assert c["global_weights"] == K
            assert c["control"] == (K - K_c) + K
        assert tr.bus.violations == []
        assert not RAW_KINDS & set(tr.bus.payload_kinds)
        assert set(tr.bus.payload_kinds) == {"context", "grad", "weight"}
    finally:
        tr.close()


@criterion(6, "join semantics", 60)
def test_criterion_6_join():
    topo, cfg, prep = tiny_setup(n_ues=3)
    small = dataclasses.replace(topo, workers=tuple(w for w in topo.workers if w.key != (1, 3)),
                                interconnections=topo.interconnections[:2])
    tr = DistributedTrainer(small, cfg, prep.train, prep.val, seed=5)
    try:
        plans = batch_plans(len(prep.train), cfg.batch_size, 5, 0)
        for plan in plans[:3]:
            tr.run_batch_loop(plan)
        store = {k: v.copy() for k, v in tr.store.latest(1).items()}
        actor = tr.join(WorkerDescriptor(1, 3), {"train": prep.train.inputs[(1, 3)],
                                                 "val": prep.val.inputs[(1, 3)]}, topo.interconnections[2])
        for k, v in actor.encoder.params.items():
            assert v.tobytes() == store[k].tobytes()
        assert tr.aggregators[1].members == [1, 2, 3]
        tr.run_batch_loop(plans[3])
        reports = tr.aggregators[1].last_reports
        assert sorted(reports) == [1, 2, 3]
        ref = brute_mean([reports[k] for k in (1, 2, 3)])
        for k, v in tr.store.latest(1).items():
            npt.assert_allclose(v, ref[k], atol=1e-15, rtol=0)
        assert tr.bus.batch_counts[(0, 3)]["weight_report"] == 4
    finally:
        tr.close()


@criterion(7, "privacy attack properties", 600)
def test_criterion_7_attack():
    topo, cfg, prep = tiny_setup(n_ues=1)
    tr = DistributedTrainer(topo, cfg, prep.train, prep.val, seed=5)
    try:
        tr.fit(max_epochs=5, patience=5)
        weights = tr.store.latest(2)
    finally:
        tr.close()
    enc = build_encoder(cfg.encoder_spec(topo, 2), 0, 2)
    enc.set_weights(weights)
    x = prep.val.inputs[(2, 1)][0]

    fixed = reconstruct(enc, enc.forward(x[None])[0], AttackConfig(max_iter=20_000), x0=x)
    assert fixed.d == 0.0
    assert similarity(x, fixed.estimate)[1] == 100.0

    ests = []
    for seed in (1, 2):
        r = attack_window(enc, x, AttackConfig(max_iter=20_000, seed=seed))
        assert r.d < 1e-6, (seed, r.d)
        ests.append(r.estimate)
    assert np.linalg.norm(ests[0] - ests[1]) > PINNED_ESTIMATE_FLOOR


@criterion(8, "wire serialization", 120)
def test_criterion_8_serialization():
    rng = np.random.default_rng(8)
    kinds = {"context_batch": "context", "slice_grad": "grad", "weight_report": "weight",
             "global_weights": "weight", "control": None}
    for i in range(1000):
        msg = list(kinds)[rng.integers(len(kinds))]
        payload = {}
        if kinds[msg]:
            for j in range(rng.integers(0, 4)):
                shape = tuple(rng.integers(0, 5, size=rng.integers(0, 4)))
                payload[f"{kinds[msg]}/t{j}"] = rng.normal(scale=10.0 ** rng.integers(-300, 300), size=shape)
        env = Envelope(msg, int(rng.integers(0, 10**6)), int(rng.integers(-10, 10**6)), int(rng.integers(0, 8)),
                       worker_endpoint(int(rng.integers(1, 4)), int(rng.integers(1, 9))), aggregator_endpoint(1),
                       payload, {"i": i, "note": "x" * int(rng.integers(0, 5))})
        out = decode_frame(encode_frame(env))
        assert (out.msg_type, out.epoch, out.batch, out.phase, out.sender, out.receiver, out.meta) == (
            env.msg_type, env.epoch, env.batch, env.phase, env.sender, env.receiver, env.meta)
        assert list(out.payload) == list(payload)
        for k, v in payload.items():
            assert out.payload[k].shape == v.shape and out.payload[k].tobytes() == v.tobytes()

    env = Envelope("weight_report", 3, 17, 7, worker_endpoint(1, 2), aggregator_endpoint(1),
                   {"weight/fwd.W": np.array([[0.5, -1.25], [2.0, 0.0]]), "weight/fwd.b": np.array(3.0)},
                   {"k": 2})
    assert encode_frame(env) == (GOLDEN / "weight_report.bin").read_bytes()


@criterion(9, "metrics identities", 60)
def test_criterion_9_metrics():
    rng = np.random.default_rng(9)
    for shape in ((3, 4), (100, 10), (40, 5, 10)):
        rep = compute_mae(rng.normal(size=shape) * 5, rng.normal(size=shape) * 5)
        assert abs(rep.overall_mae - rep.per_horizon_mae.mean()) <= 1e-12
    truth = rng.uniform(0, 20, size=(50, 10))
    for offset in (0.0, 0.3, 1.0, -2.5):
        rep = compute_mae(truth + offset, truth)
        assert abs(rep.overall_mae - abs(offset)) <= 1e-12
        assert abs(rep.last_step_mae - abs(offset)) <= 1e-12
