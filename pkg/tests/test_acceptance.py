"""End-to-end acceptance checks, one per numbered criterion.

Each check returns (passed, detail). Under pytest every criterion is its own
test and a PASS/FAIL summary line per criterion is printed at the end of the
module; ``python tests/test_acceptance.py`` prints the same lines directly.
"""

from __future__ import annotations

import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import brute_force_labels, random_tree  # noqa: E402

from skelgait.data import build_protocol
from skelgait.evaluate import evaluate, render_report
from skelgait.gradcheck import check_gradients
from skelgait.graph import (
    PARTITION_STRATEGIES,
    normalized_adjacency,
    num_labels,
    partition_adjacency,
    spatial_labels,
)
from skelgait.metric import TripletBatch, batch_hard_loss, batch_hard_triplets, pairwise_distances, triplet_loss
from skelgait.nn import (
    NetworkConfig,
    StgcnUnit,
    build_network,
    embed,
    literal_st_conv_reference,
    spatial_graph_conv,
)
from skelgait.synth import SynthConfig, generate_dataset
from skelgait.tensor import (
    BatchNormState,
    Tensor,
    backward,
    batch_norm,
    global_max_pool,
    matmul,
    relu,
    temporal_conv,
    tsum,
)
from skelgait.train import TrainConfig, load_checkpoint, restore_model, save_checkpoint, train

GRAD_TOL = 1e-4
FD_STEP = 1e-5
INSTANCES = 20


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(a, gap=1e-3):
    a[np.abs(a) < gap] += np.sign(a[np.abs(a) < gap] + 1e-12) * gap
    return a


# ---------------------------------------------------------------- 1


def _grad_cases():
    """Builders returning (fn, inputs) for one random small instance of each op."""

    def mm(rng):
        m, k, n = rng.integers(1, 5, size=3)
        return matmul, [_param(rng, m, k), _param(rng, k, n)]

    def rl(rng):
        x = Tensor(_away_from_zero(rng.normal(size=tuple(rng.integers(1, 5, size=3)))), requires_grad=True)
        return relu, [x]

    def bn(rng):
        b, c, t, n = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        st = BatchNormState(c, n)
        st.weight.data[:] = rng.normal(size=st.weight.shape)
        st.bias.data[:] = rng.normal(size=st.bias.shape)
        training = bool(rng.integers(0, 2))
        if not training:
            st.running_mean[:] = rng.normal(size=st.shape)
            st.running_var[:] = rng.uniform(0.5, 2, size=st.shape)
        return (lambda x, g, b_: batch_norm(x, st, training)), [_param(rng, b, c, t, n), st.weight, st.bias]

    def tc(rng):
        c, o, t, n = (int(v) for v in rng.integers(1, 4, size=4))
        g = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        return (lambda x, w, bias: temporal_conv(x, w, bias, stride)), [
            _param(rng, 2, c, t + 2, n), _param(rng, o, c, g), _param(rng, o)]

    def sg(rng):
        n = int(rng.integers(2, 7))
        pa = normalized_adjacency(random_tree(rng, n), str(rng.choice(PARTITION_STRATEGIES)))
        c, o = (int(v) for v in rng.integers(1, 4, size=2))
        return (lambda x, w: spatial_graph_conv(x, pa, w)), [
            _param(rng, 2, c, 3, n), _param(rng, pa.num_labels, o, c)]

    def gp(rng):
        x = rng.normal(size=(2, 3, 4, 3))
        # keep the maximum unique by a clear gap so the difference quotient sees one branch
        flat = x.reshape(2, 3, -1)
        top = flat.argmax(axis=-1)
        np.put_along_axis(flat, top[..., None], np.take_along_axis(flat, top[..., None], -1) + 0.1, -1)
        return global_max_pool, [Tensor(x, requires_grad=True)]

    def tl(rng):
        labels = np.repeat(np.arange(int(rng.integers(2, 4))), int(rng.integers(2, 4)))
        while True:
            e = rng.normal(size=(len(labels), 4))
            d = pairwise_distances(Tensor(e)).data
            tb = batch_hard_triplets(d, labels, 0.2)
            a = np.arange(len(labels))
            slack = d[a, tb.positives] - d[a, tb.negatives] + 0.2
            sorted_rows = np.sort(d + np.eye(len(labels)) * 1e9, axis=1)
            if np.all(np.abs(slack) > 1e-3) and np.all(np.diff(sorted_rows, axis=1) > 1e-3):
                break

        def f(x):
            dist = pairwise_distances(x)
            return triplet_loss(dist, batch_hard_triplets(dist, labels, 0.2))

        return f, [Tensor(e, requires_grad=True)]

    def unit(rng):
        n = int(rng.integers(3, 6))
        pa = normalized_adjacency(random_tree(rng, n), "spatial")
        c_in, c_out = (int(v) for v in rng.integers(2, 5, size=2))
        stride = int(rng.integers(1, 3))
        u = StgcnUnit(c_in, c_out, stride, 3, n, 3, rng, residual=bool(rng.integers(0, 2)))
        training = bool(rng.integers(0, 2))
        for _, st in u.norm_states():
            st.running_mean[:] = rng.normal(size=st.shape)
            st.running_var[:] = rng.uniform(0.5, 2.0, size=st.shape)
        params = [p for _, p in u.named_parameters()]
        return (lambda x, *ps: u(x, pa, training)), [_param(rng, 3, c_in, 5, n)] + params

    return {"matmul": mm, "relu": rl, "batch_norm": bn, "temporal_conv": tc, "spatial_graph_conv": sg,
            "global_max_pool": gp, "triplet_loss": tl, "stgcn_unit": unit}


def criterion_1():
    start = time.perf_counter()
    worst = {}
    for name, build in _grad_cases().items():
        errs = []
        for k in range(INSTANCES):
            fn, inputs = build(np.random.default_rng([1, k]))
            errs += check_gradients(fn, inputs, step=FD_STEP)
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, f"{INSTANCES} instances/op, worst rel err: {detail}; {elapsed:.0f}s"


# ---------------------------------------------------------------- 2


def criterion_2():
    worst = 0.0
    count = 0
    for strategy in PARTITION_STRATEGIES:
        for k in range(50):
            rng = np.random.default_rng([2, k, len(strategy)])
            n = int(rng.integers(1, 7))
            t = int(rng.integers(1, 9))
            g = int(rng.choice([1, 3, 5]))
            layout = random_tree(rng, n)
            s = num_labels(strategy)
            c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
            x = rng.normal(size=(c_in, t, n))
            w_s = rng.normal(size=(s, c_out, c_in))
            u = rng.normal(size=(c_out, c_out, g))
            combined = np.stack([u[:, :, d] @ w_s[l] for d in range(g) for l in range(s)])
            lit = literal_st_conv_reference(x, combined, layout, strategy, g)
            pa = normalized_adjacency(layout, strategy)
            fac = temporal_conv(spatial_graph_conv(Tensor(x[None]), pa, Tensor(w_s)), Tensor(u)).data[0]
            worst = max(worst, float(np.abs(lit - fac).max()))
            count += 1
    return worst <= 1e-10, f"{count} instances, max |literal - factorized| = {worst:.1e}"


# ---------------------------------------------------------------- 3


def criterion_3():
    bad = []
    for k in range(50):
        rng = np.random.default_rng([3, k])
        layout = random_tree(rng, int(rng.integers(1, 21)))
        eye_adj = np.eye(layout.num_joints) + layout.adjacency()
        for strategy in PARTITION_STRATEGIES:
            if not np.array_equal(spatial_labels(layout, strategy), brute_force_labels(layout, strategy)):
                bad.append((k, strategy, "labels"))
            pa = partition_adjacency(layout, strategy)
            oracle = brute_force_labels(layout, strategy)
            expect = np.stack([(oracle == s).astype(float) for s in range(pa.num_labels)])
            if not np.array_equal(pa.matrices, expect):
                bad.append((k, strategy, "matrices"))
            if not np.array_equal(pa.matrices.sum(axis=0), eye_adj):
                bad.append((k, strategy, "sum"))
    return not bad, f"50 trees x 3 strategies, mismatches: {bad[:3] or 'none'}"


# ---------------------------------------------------------------- 4


def _exhaustive(d, labels):
    pos, neg = [], []
    for a in range(len(labels)):
        best = None
        for p, n in itertools.product(range(len(labels)), repeat=2):
            if p == a or labels[p] != labels[a] or labels[n] == labels[a]:
                continue
            key = (-d[a, p], p, d[a, n], n)
            best = key if best is None or key < best else best
        pos.append(best[1])
        neg.append(best[3])
    return pos, neg


def criterion_4():
    bad = 0
    for k in range(100):
        rng = np.random.default_rng([4, k])
        ids = int(rng.integers(2, 5))
        per = int(rng.integers(2, 16 // ids + 1))
        labels = list(rng.permutation(np.repeat(np.arange(ids), per)))
        d = pairwise_distances(Tensor(rng.normal(size=(len(labels), 3)))).data
        tb = batch_hard_triplets(d, labels)
        pos, neg = _exhaustive(d, labels)
        bad += list(tb.positives) != pos or list(tb.negatives) != neg
    return bad == 0, f"100 batches (B<=16), {bad} disagreements with exhaustive search"


# ---------------------------------------------------------------- 5


def _single(dap, dan, margin):
    d = np.zeros((3, 3))
    d[0, 1] = d[1, 0] = dap
    d[0, 2] = d[2, 0] = dan
    return float(triplet_loss(Tensor(d), TripletBatch([0], [1], [2], margin)).data)


def criterion_5():
    hand = (_single(2.0, 1.0, 0.3), _single(0.5, 1.0, 0.3))
    hand_ok = hand == (1.3, 0.0)
    bad = 0
    for k in range(200):
        rng = np.random.default_rng([5, k])
        labels = np.repeat(np.arange(3), 2)
        margin = float(rng.uniform(0, 1))
        e = Tensor(rng.normal(size=(6, 2)) * rng.uniform(0.1, 3))
        loss, tb = batch_hard_loss(e, labels, margin)
        d = pairwise_distances(e).data
        a = np.arange(6)
        holds = bool(np.all(d[a, tb.negatives] - d[a, tb.positives] >= margin))
        bad += (float(loss.data) == 0.0) != holds
    return hand_ok and bad == 0, f"hand cases {hand}, iff-property violations {bad}/200"


# ---------------------------------------------------------------- 6

E2E_NET = NetworkConfig(depth="normal", partition="spatial", dtype="float32")
E2E_TRAIN = TrainConfig(P=4, K=4, crop_length=32, epochs=75, seed=0)  # 64 sequences / 16 -> 300 steps


def criterion_6():
    start = time.perf_counter()
    seqs, _ = generate_dataset(SynthConfig(num_ids=16, seqs_per_id=8, seed=0))
    proto = build_protocol(seqs)
    untrained = evaluate(build_network(E2E_NET, seed=0), proto).average
    result = train(proto.train, E2E_TRAIN, E2E_NET)
    report = evaluate(result.model, proto)
    elapsed = time.perf_counter() - start
    print(render_report(report))
    ok = report.average >= 0.90 and untrained <= 0.30 and elapsed <= 600
    return ok, (f"{len(proto.train_ids)} train / {len(proto.test_ids)} test ids, trained {report.average:.3f} "
                f"(>= 0.90), untrained {untrained:.3f} (<= 0.30), {len(result.losses)} steps, {elapsed:.0f}s")


# ---------------------------------------------------------------- 7


def criterion_7():
    problems = []
    net = build_network(NetworkConfig(dtype="float32"))
    if len(net.units) != 10:
        problems.append(f"{len(net.units)} units")
    if net.channel_trace() != [3] + [64] * 4 + [128] * 3 + [256] * 3:
        problems.append(f"trace {net.channel_trace()}")
    if sum(u.stride == 2 for u in net.units) != 2:
        problems.append("stride-2 count")
    for t in (16, 30, 64):
        shape = embed(net, np.random.default_rng(t).normal(size=(3, t, 18))).shape
        if shape != (256,):
            problems.append(f"T={t} -> {shape}")
    for depth, units in (("shallow", 7), ("deeper", 12)):
        got = len(build_network(NetworkConfig(depth=depth, dtype="float32")).units)
        if got != units:
            problems.append(f"{depth}: {got} units")
    return not problems, "10 units, trace 3-64x4-128x3-256x3, 256-d for T in 16/30/64, shallow 7, deeper 12" \
        if not problems else "; ".join(problems)


# ---------------------------------------------------------------- 8


def criterion_8(tmp_dir: Path):
    seqs, _ = generate_dataset(SynthConfig(num_ids=8, seqs_per_id=8, min_frames=20, max_frames=30, seed=3))
    proto = build_protocol(seqs)
    net = NetworkConfig(depth="shallow", dtype="float32")
    cfg = TrainConfig(P=4, K=2, crop_length=16, epochs=4, steps_per_epoch=1, seed=11)
    a = train(proto.train, cfg, net, checkpoint_dir=tmp_dir)
    b = train(proto.train, cfg, net)
    same_trace = np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
    restored = restore_model(load_checkpoint(a.checkpoint_path))
    same_emb = all(
        embed(restored, s.to_network_input()).tobytes() == embed(a.model, s.to_network_input()).tobytes()
        for s in proto.gallery[:6]
    )
    path64 = save_checkpoint(build_network(NetworkConfig(depth="shallow"), seed=5), tmp_dir / "f64.skg")
    m64 = restore_model(load_checkpoint(path64))
    x = proto.gallery[0].to_network_input()
    same64 = embed(m64, x).tobytes() == embed(build_network(NetworkConfig(depth="shallow"), seed=5), x).tobytes()
    ok = same_trace and same_emb and same64
    return ok, f"loss traces identical: {same_trace}; embeddings after reload identical: {same_emb and same64}"


# ---------------------------------------------------------------- 9


def criterion_9():
    net = build_network(NetworkConfig(), seed=0)
    strided = [u for u in net.units if u.stride == 2]
    zero_slices = 0
    checks = 0
    for k, u in enumerate(strided):
        for seed in range(5):
            rng = np.random.default_rng([9, k, seed])
            t = int(rng.integers(4, 13))
            x = Tensor(rng.normal(size=(2, u.c_in, t, 18)), requires_grad=True)
            out = u(x, net.adjacency, True)
            backward(tsum(out * Tensor(rng.normal(size=out.shape))))
            per_frame = np.abs(x.grad).sum(axis=(0, 1, 3))
            zero_slices += int(np.sum(per_frame == 0))
            checks += 1
    return zero_slices == 0, f"{len(strided)} stride-2 units x 5 inputs, zero time slices: {zero_slices}"


# ---------------------------------------------------------------- 10

ABLATIONS = [("spatial", "normal"), ("uniform", "normal"), ("distance", "normal"),
             ("spatial", "shallow"), ("spatial", "deeper")]


def run_ablation(partition: str, depth: str):
    start = time.perf_counter()
    seqs, _ = generate_dataset(SynthConfig(num_ids=4, seqs_per_id=8, seed=0))
    proto = build_protocol(seqs)
    net = NetworkConfig(depth=depth, partition=partition, dtype="float32")
    result = train(proto.train, TrainConfig(P=2, K=4, crop_length=32, epochs=40, steps_per_epoch=1), net)
    report = evaluate(result.model, proto)
    return report, time.perf_counter() - start


def criterion_10():
    lines, ok = [], True
    for partition, depth in ABLATIONS:
        report, elapsed = run_ablation(partition, depth)
        complete = set(report.conditions) == {"NM", "BG", "CL"} and np.isfinite(report.average)
        ok &= complete and elapsed <= 120
        lines.append(f"{partition}/{depth} avg {report.average:.3f} {elapsed:.0f}s")
    return ok, "; ".join(lines)


# ---------------------------------------------------------------- pytest glue

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is None:
        return
    reporter.write_line("")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        reporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def _record(n, outcome):
    ok, detail = outcome
    _RESULTS[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_1_gradients():
    _record(1, criterion_1())


def test_criterion_2_factorization():
    _record(2, criterion_2())


def test_criterion_3_partitions():
    _record(3, criterion_3())


def test_criterion_4_mining():
    _record(4, criterion_4())


def test_criterion_5_hinge():
    _record(5, criterion_5())


@pytest.mark.slow
def test_criterion_6_synthetic_end_to_end():
    _record(6, criterion_6())


def test_criterion_7_architecture():
    _record(7, criterion_7())


def test_criterion_8_determinism(tmp_path):
    _record(8, criterion_8(tmp_path))


def test_criterion_9_residual_gradient():
    _record(9, criterion_9())


@pytest.mark.slow
def test_criterion_10_ablations():
    _record(10, criterion_10())


if __name__ == "__main__":
    import tempfile

    checks = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
              6: criterion_6, 7: criterion_7, 9: criterion_9, 10: criterion_10}
    failed = 0
    for n in range(1, 11):
        if n == 8:
            with tempfile.TemporaryDirectory() as d:
                ok, detail = criterion_8(Path(d))
        else:
            ok, detail = checks[n]()
        failed += not ok
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    sys.exit(1 if failed else 0)
