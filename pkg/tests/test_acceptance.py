"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the terminal summary by conftest.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from infinilab import attention as A
from infinilab import cli
from infinilab import config as C
from infinilab import data as D
from infinilab import evaluate as E
from infinilab import model as M
from infinilab import telemetry as TM
from infinilab import tensor as T
from infinilab import train as TR
from infinilab.checkpoint import load_checkpoint
from infinilab.tensor import Tensor

from oracles import (
    adam_first_step,
    central_difference,
    elementwise_relative_error,
    elu1,
    relative_error,
)

import extrapolation

REPORT: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT.append(line)
    print(line)


# ---------------------------------------------------------------- 1 gradients

SEEDS = range(20)


def _op_gradient_error(fn, arrays, seed):
    rng = np.random.default_rng(seed + 1000)
    R = rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.sum_(T.mul(fn(*tensors), Tensor(R))).backward()
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(np.sum(fn(*args).data * R))
        worst = max(worst, relative_error(tensors[i].grad, central_difference(f, a)))
    return worst


def _op_cases(rng):
    n = lambda *s: rng.normal(size=s)
    away = lambda *s: n(*s) + np.sign(n(*s)) * 0.1  # keep piecewise ops off their kinks
    ids = rng.integers(0, 5, size=(2, 3))
    targets = rng.integers(0, 4, size=(3,))
    mask = rng.random(3) > 0.3
    mask[0] = True
    cos, sin = np.cos(n(3, 2)), np.sin(n(3, 2))
    return {
        "add": (T.add, [n(2, 3), n(3)]),
        "sub": (T.sub, [n(2, 3), n(2, 1)]),
        "mul": (T.mul, [n(2, 3), n(1, 3)]),
        "div": (T.div, [n(2, 3), np.abs(n(2, 3)) + 0.5]),
        "scale": (lambda x: T.scale(x, 0.37), [n(4)]),
        "matmul": (T.matmul, [n(2, 3, 4), n(4, 2)]),
        "elu_plus_one": (T.elu_plus_one, [away(3, 4)]),
        "silu": (T.silu, [n(3, 4)]),
        "hard_sigmoid": (T.hard_sigmoid, [rng.uniform(-2.9, 2.9, size=5)]),
        "reshape": (lambda x: T.reshape(x, (3, 2)), [n(2, 3)]),
        "transpose": (lambda x: x.swapaxes(-1, -2), [n(2, 3, 4)]),
        "slice": (lambda x: x[:, 1:3], [n(3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), [n(2, 3), n(2, 2)]),
        "sum": (lambda x: T.sum_(x, axis=0), [n(3, 4)]),
        "mean": (lambda x: T.mean(x, axis=-1), [n(3, 4)]),
        "softmax": (T.softmax_lastdim, [n(3, 5)]),
        "masked_softmax": (lambda x: T.softmax_lastdim(x, A.causal_mask(4)), [n(4, 4)]),
        "rmsnorm": (lambda x, w: T.rmsnorm(x, w, 1e-5), [n(3, 4), n(4)]),
        "embedding": (lambda w: T.embedding_lookup(w, ids), [n(5, 3)]),
        "rotate_pairs": (lambda x: T.rotate_pairs(x, cos, sin), [n(2, 3, 4)]),
        "cross_entropy": (lambda x: T.cross_entropy(x, targets), [n(3, 4)]),
        "masked_cross_entropy": (lambda x: T.cross_entropy(x, targets, mask), [n(3, 4)]),
        "memory_retrieve": (
            lambda q, m, nn: A.memory_retrieve(q, A.MemoryState(m, nn), 1e-6),
            [n(2, 3, 4), n(2, 4, 3), np.abs(n(2, 4)) + 0.5],
        ),
    }


def _model_gradient_fraction(cfg, seed):
    rng = np.random.default_rng(seed)
    w = M.init_weights(cfg, seed=seed, dtype=np.float64)
    for name, t in w.items():
        if not name.endswith("norm"):
            t.data[:] = rng.normal(0, 0.4, size=t.shape)
        if name.endswith(".gate"):
            t.data[:] = rng.uniform(-2.5, 2.5, size=t.shape)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 7))
    inputs, targets = ids[:, :-1], ids[:, 1:]
    T.cross_entropy(M.forward(inputs, w, cfg), targets).backward()
    auto, numeric = [], []
    for name, t in w.items():
        def loss(arr, name=name):
            return float(T.cross_entropy(M.forward(inputs, dict(w, **{name: Tensor(arr)}), cfg), targets).data)
        auto.append(t.grad.ravel())
        numeric.append(central_difference(loss, t.data.copy()).ravel())
    err = elementwise_relative_error(np.concatenate(auto), np.concatenate(numeric))
    return float(np.mean(err < 1e-3)), err.size


def test_criterion_1_gradient_correctness():
    start = time.time()
    worst_op = ("", 0.0)
    for seed in SEEDS:
        for name, (fn, arrays) in _op_cases(np.random.default_rng(seed)).items():
            e = _op_gradient_error(fn, arrays, seed)
            if e >= worst_op[1]:
                worst_op = (name, e)
    fractions = []
    n_params = 0
    for seed in SEEDS:
        for memory in (True, False):
            cfg = M.make_config(layers=2, d_model=4, heads=2, d_ff=6, vocab_size=7, segment_length=2,
                                memory_enabled=memory)
            frac, n_params = _model_gradient_fraction(cfg, seed)
            fractions.append(frac)
    elapsed = time.time() - start
    ok = worst_op[1] < 1e-4 and min(fractions) >= 0.95 and n_params <= 10_000 and elapsed < 120
    report(1, ok, f"worst op rel err {worst_op[1]:.1e} ({worst_op[0]}); model min fraction within 1e-3 "
                  f"{min(fractions):.3f} over {len(fractions)} runs of {n_params} params; {elapsed:.0f}s")
    assert worst_op[1] < 1e-4
    assert min(fractions) >= 0.95 and n_params <= 10_000
    assert elapsed < 120


# ------------------------------------------------------------ 2 alpha = 0


def test_criterion_2_alpha_zero_equivalence():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = A.AttentionConfig(heads=4, d_model=32, d_key=8, d_value=8, segment_length=16)
        base_cfg = replace(cfg, memory_enabled=False)
        w = {n: Tensor(rng.normal(0, 0.3, size=(32, 32)).astype(np.float32)) for n in ("wq", "wk", "wv", "wo")}
        w["gate"] = Tensor(rng.uniform(-20, -6, size=4).astype(np.float32))
        x = Tensor(rng.normal(size=(2, 4 * 16, 32)).astype(np.float32))
        rope = M.rope_tables(np.arange(64), 8, 1e4)
        for r in (None, rope):
            out = A.attention_forward(x, w, cfg, r).data
            ref = A.attention_forward(x, w, base_cfg, r).data
            worst = max(worst, float(np.max(np.abs(out - ref))))
    report(2, worst <= 1e-6, f"max |infini - baseline| with gate raws <= -6: {worst:.1e} (tol 1e-6)")
    assert worst <= 1e-6


# ---------------------------------------------------------- 3 memory algebra


def test_criterion_3_memory_algebra():
    rng = np.random.default_rng(0)
    # (a) permutation invariance
    perm_err = 0.0
    for _ in range(5):
        segs = [(rng.normal(size=(2, n, 4)), rng.normal(size=(2, n, 3))) for n in (5, 2, 7, 1)]
        states = []
        for order in itertools.permutations(range(4)):
            mem = A.MemoryState.empty(2, 4, 3, dtype=np.float64)
            for i in order:
                mem = A.memory_update(mem, Tensor(segs[i][0]), Tensor(segs[i][1]))
            states.append(mem)
        for s in states[1:]:
            perm_err = max(perm_err, float(np.max(np.abs(s.M.data - states[0].M.data))),
                           float(np.max(np.abs(s.N.data - states[0].N.data))))
    # (b) single stored pair: |out - v| <= |v| * eps / (w + eps) elementwise
    eps = 1e-6
    single_ok = True
    for _ in range(50):
        k, v = rng.normal(size=(1, 1, 4)), rng.normal(size=(1, 1, 3))
        mem = A.memory_update(A.MemoryState.empty(1, 4, 3, dtype=np.float64), Tensor(k), Tensor(v))
        q = rng.normal(size=(1, 8, 4))
        out = A.memory_retrieve(Tensor(q), mem, eps).data[0]
        w = elu1(q[0]) @ elu1(k[0, 0])
        bound = np.abs(v[0, 0])[None, :] * (eps / (w + eps))[:, None]
        single_ok &= bool(np.all(np.abs(out - v[0, 0]) <= bound + 1e-15))
    # (c) convex hull on 100 three-pair instances
    hull_err = 0.0
    hull_ok = True
    for _ in range(100):
        keys, values = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
        mem = A.memory_update(A.MemoryState.empty(1, 4, 2, dtype=np.float64), Tensor(keys[None]), Tensor(values[None]))
        q = rng.normal(size=4)
        out = A.memory_retrieve(Tensor(q[None, None]), mem, 1e-12).data[0, 0]
        wts = np.array([elu1(q) @ elu1(k) for k in keys])
        lam = wts / wts.sum()
        hull_ok &= bool(np.all(lam >= 0) and abs(lam.sum() - 1) < 1e-12)
        hull_err = max(hull_err, float(np.max(np.abs(out - lam @ values))))
    ok = perm_err <= 1e-12 and single_ok and hull_ok and hull_err <= 1e-8
    report(3, ok, f"(a) permutation err {perm_err:.1e}; (b) single pair within eps bound: {single_ok}; "
                  f"(c) convex hull err {hull_err:.1e} over 100 instances")
    assert perm_err <= 1e-12
    assert single_ok
    assert hull_ok and hull_err <= 1e-8


# --------------------------------------------------------------- 4 causality


def _causality(cfg, dtype, seed):
    w = M.init_weights(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, t in w.items():
        if name.endswith(".gate"):
            t.data[:] = rng.uniform(-3, 3, size=t.shape)
    L = 3 * cfg.attention.segment_length + 2
    ids = rng.integers(0, cfg.vocab_size, size=L)
    base = M.forward(ids, w, cfg).data
    worst = 0.0
    for t in range(L - 1):
        other = ids.copy()
        other[t + 1 :] = rng.integers(0, cfg.vocab_size, size=L - t - 1)
        worst = max(worst, float(np.max(np.abs(M.forward(other, w, cfg).data[: t + 1] - base[: t + 1]))))
    return worst


def test_criterion_4_causality():
    results = {}
    for memory in (True, False):
        cfg = M.make_config(layers=2, d_model=16, heads=2, d_ff=32, vocab_size=D.VOCAB_SIZE, segment_length=4,
                            memory_enabled=memory)
        results[(memory, 64)] = max(_causality(cfg, np.float64, s) for s in range(3))
        results[(memory, 32)] = max(_causality(cfg, np.float32, s) for s in range(3))
    ok = all(results[(m, 64)] == 0.0 and results[(m, 32)] <= 1e-6 for m in (True, False))
    detail = "; ".join(f"{'infini' if m else 'baseline'} {b}-bit max diff {e:.1e}" for (m, b), e in results.items())
    report(4, ok, detail)
    for m in (True, False):
        assert results[(m, 64)] == 0.0
        assert results[(m, 32)] <= 1e-6


# ----------------------------------------------------- 5 schedule / optimizer


def test_criterion_5_schedule_and_optimizer():
    sched = TR.Schedule.from_train(C.load_config("full_pretrain").train)
    lr_ok = TR.lr_at(sched, 500) == 6e-5 and TR.lr_at(sched, sched.total_steps) == 6e-6
    rng = np.random.default_rng(0)
    adam_err = 0.0
    for _ in range(50):
        theta, g = rng.normal(size=2)
        lr = 10 ** rng.uniform(-5, -2)
        p = {"w": Tensor(np.array([[theta]]))}
        TR.adamw_step(p, {"w": np.array([[g]])}, TR.OptimizerState(), lr)
        adam_err = max(adam_err, abs(p["w"].data[0, 0] - adam_first_step(theta, g, lr, 0.9, 0.95, 1e-8, 0.1)))
    clip_err = 0.0
    for _ in range(200):
        scale = 10 ** rng.uniform(-2, 2)
        grads = [rng.normal(size=(4, 5)).astype(np.float32) * scale, rng.normal(size=7).astype(np.float32) * scale]
        pre = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads)))
        TR.clip_global_norm(grads, 1.0)
        post = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads)))
        clip_err = max(clip_err, abs(post - min(pre, 1.0)))
    ok = lr_ok and adam_err <= 1e-12 and clip_err <= 1e-6
    report(5, ok, f"lr_at(500)={TR.lr_at(sched, 500)!r} lr_at(total)={TR.lr_at(sched, sched.total_steps)!r}; "
                  f"adamw err {adam_err:.1e}; clip err {clip_err:.1e}")
    assert lr_ok
    assert adam_err <= 1e-12
    assert clip_err <= 1e-6


# --------------------------------------------------- 6 desk-scale extrapolation


@pytest.mark.slow
def test_criterion_6_desk_extrapolation(tmp_path):
    outcome = extrapolation.run_experiment(tmp_path)
    for line in outcome.summary_lines():
        print(line)
    report(6, outcome.passed, outcome.headline())
    assert outcome.infini_long >= outcome.baseline_long, "Infini below baseline at contexts >= 512"
    assert outcome.infini_short_min >= 80.0, "Infini below 80% at contexts <= 128"
    assert outcome.baseline_short_min >= 80.0, "baseline below 80% at contexts <= 128"


# ------------------------------------------------------------- 7 telemetry


def test_criterion_7_telemetry_consistency(tmp_path):
    mc = M.make_config(layers=2, d_model=16, heads=2, d_ff=32, vocab_size=D.VOCAB_SIZE, segment_length=8)
    tc = C.TrainConfig(steps=12, batch_size=2, seq_len=24, base_lr=5e-2, warmup_steps=2, floor_lr=1e-3,
                       corpus_documents=100, snapshot_every=3, checkpoint_every=6)
    TR.train_loop(C.RunConfig(mc, tc), run_dir=tmp_path)
    rows = TM.read_telemetry(tmp_path / "telemetry.csv")
    snaps = TM.read_alpha_log(tmp_path / "alpha.csv")
    in_range = all(np.all((s.alpha >= 0) & (s.alpha <= 1)) for s in snaps)
    mean_err = max(abs(TM.mean_alpha(s) - TM.parse_heatmap(TM.alpha_heatmap_export(s)).mean()) for s in snaps)
    recompute_err = 0.0
    for ck_name, step in (("step_000006.ckpt", 6), ("step_000012.ckpt", 12)):
        ck = load_checkpoint(tmp_path / "checkpoints" / ck_name)
        logged = next(s for s in snaps if s.step == step)
        raws = M.gate_raws(ck.weights, ck.config)
        recomputed = np.array([[A.hard_sigmoid(float(r)) for r in row] for row in raws])
        recompute_err = max(recompute_err, float(np.max(np.abs(recomputed - logged.alpha))))
    rows_ok = len(rows) == 12 and [r["step"] for r in rows] == list(range(1, 13))
    ok = mean_err <= 1e-12 and in_range and recompute_err <= 1e-6 and rows_ok
    report(7, ok, f"mean vs heatmap err {mean_err:.1e}; all alpha in [0,1]: {in_range}; "
                  f"checkpoint recompute err {recompute_err:.1e}; telemetry rows {len(rows)}/12")
    assert mean_err <= 1e-12
    assert in_range
    assert recompute_err <= 1e-6
    assert rows_ok


# ------------------------------------------------- 8 determinism / persistence


def test_criterion_8_determinism_and_persistence(tmp_path):
    mc = M.make_config(layers=2, d_model=16, heads=2, d_ff=32, vocab_size=D.VOCAB_SIZE, segment_length=8)
    tc = C.TrainConfig(steps=20, batch_size=2, seq_len=24, base_lr=3e-3, warmup_steps=2, floor_lr=3e-4,
                       corpus_documents=100, checkpoint_every=10)
    cfg = C.RunConfig(mc, tc)
    T.set_deterministic(True)
    try:
        full = TR.train_loop(cfg, run_dir=tmp_path / "a")
        ck_path = tmp_path / "a" / "checkpoints" / "step_000010.ckpt"
        rcfg, w, opt = TR.resume_from(ck_path)
        resumed = TR.train_loop(rcfg, weights=w, optimizer=opt)
    finally:
        T.set_deterministic(False)
    loss_err = float(np.max(np.abs(np.array(resumed.losses) - np.array(full.losses[10:]))))

    final = load_checkpoint(tmp_path / "a" / "checkpoints" / "final.ckpt")
    bit_exact = all(final.weights[n].data.tobytes() == t.data.tobytes() for n, t in full.weights.items())
    bit_exact &= all(final.moments[n].tobytes() == a.tobytes() for n, a in full.optimizer.moments().items())

    csvs = []
    for out in ("e1", "e2"):
        cli.main(["eval-passkey", "--checkpoint", str(tmp_path / "a" / "checkpoints" / "final.ckpt"),
                  "--contexts", "64,128", "--samples-per-cell", "2", "--deterministic", "--out", str(tmp_path / out)])
        csvs.append((tmp_path / out / "passkey.csv").read_bytes())
    ok = bit_exact and len(resumed.losses) == 10 and loss_err <= 1e-6 and csvs[0] == csvs[1]
    report(8, ok, f"checkpoint bit-exact: {bit_exact}; resumed 10-step loss err {loss_err:.1e}; "
                  f"eval CSVs identical: {csvs[0] == csvs[1]}")
    assert bit_exact
    assert len(resumed.losses) == 10 and loss_err <= 1e-6
    assert csvs[0] == csvs[1]
