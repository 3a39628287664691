"""Acceptance criteria, one test per criterion; a PASS/FAIL line for each is printed in the summary."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from _fd import away_from_zero, central_fd, draw_case, graph_fd_errors, rel_err, spread_refs
from lid_align.cli import parse_and_dispatch
from lid_align.feature import TransformSpec, random_mask
from lid_align.harness import (ExperimentConfig, mean_plid_against_original, run_dimension_recovery, run_drift_demo,
                               run_inpaint_direct, run_train_toy)
from lid_align.knn import NeighborList
from lid_align.lid import ilid, ilid_gradient, ilid_loss, lid_mle, plid, plid_gradient, plid_loss
from lid_align.loss import LossWeights, adv_critic_loss, total_loss
from lid_align.net import LinearCritic
from lid_align.tensor import save_tensor
from lid_align.textures import texture_batch
from lid_align.images import save_image
from test_net import OPS, single_op_graph

FD_TOL = 1e-4


def nl(d):
    return NeighborList(np.asarray(d, dtype=np.float64), np.arange(len(d)))


def random_lists(rng, count):
    """Sorted positive distance lists with r_1 < r_max, over wide scales and sizes."""
    out = []
    while len(out) < count:
        k = int(rng.integers(2, 60))
        scale = 10 ** rng.uniform(-3, 3)
        d = np.sort(rng.uniform(0, 1, k)) * scale
        if d[0] > 0 and d[-1] / d[0] > 1 + 1e-6:
            out.append(d)
    return out


def test_01_dimension_recovery(acceptance):
    t0 = time.perf_counter()
    rows = run_dimension_recovery(ExperimentConfig(seed=0), dims=(1, 2, 4, 8), n=10000, k=100, n_queries=100)
    elapsed = time.perf_counter() - t0
    within = all(abs(r.mean - r.dim) <= 0.2 * r.dim for r in rows)
    detail = ", ".join(f"D={r.dim}: {r.mean:.3f}" for r in rows) + f"; {elapsed:.1f} s"
    acceptance(1, "dimension recovery within 20% in under 30 s", within and elapsed < 30, detail)


def test_02_drift_monotonicity(acceptance):
    rng = np.random.default_rng(2)
    failures = 0
    for d in random_lists(rng, 1000):
        drift = 10 ** rng.uniform(-3, 3)
        if not lid_mle(nl(d + drift)).value > lid_mle(nl(d)).value:
            failures += 1
    acceptance(2, "adding d > 0 strictly increases the estimate", failures == 0,
               f"{failures} failures over 1000 lists")


def test_03_drift_curve(acceptance):
    pts = run_drift_demo(ExperimentConfig(seed=0), n_drifts=20)
    vals = [p.mean_ilid for p in pts]
    ok = len(vals) == 20 and all(b > a for a, b in zip(vals, vals[1:])) and vals[-1] > vals[0]
    acceptance(3, "drift-demo curve strictly increasing over 20 values", ok,
               f"iLID {vals[0]:.3f} at d=0 -> {vals[-1]:.3f} at d={pts[-1].drift:g}")


def test_04_scale_invariance(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for d in random_lists(rng, 1000):
        c = 10 ** rng.uniform(-3, 3)
        a, b = lid_mle(nl(d)).value, lid_mle(nl(c * d)).value
        worst = max(worst, abs(a - b) / abs(a))
    acceptance(4, "lid_mle(c r) == lid_mle(r) for c in [1e-3, 1e3]", worst <= 1e-6,
               f"worst relative gap {worst:.2e}")


def _ilid_case(rng):
    y = rng.normal(size=int(rng.integers(2, 8)))
    return y, spread_refs(rng, y, int(rng.integers(10, 30)))


def _plid_case(rng):
    p = rng.normal(size=9 * int(rng.integers(1, 4)))
    return p, spread_refs(rng, p, int(rng.integers(8, 25)))


def test_05_gradients(acceptance):
    rng = np.random.default_rng(5)
    worst = {}
    for label, make, fn, grad in (("iLID", _ilid_case, ilid, ilid_gradient),
                                  ("pLID", _plid_case, plid, plid_gradient)):
        errs = []
        for _ in range(100):
            k = int(rng.integers(2, 8))
            # near-equidistant neighbors make the estimator so curved that a 1e-3
            # central difference is off by more than 1e-4 (error shrinks as step^2)
            q, R = draw_case(rng, make, k, margin=0.1)
            g = grad(q, R, k)
            fd = central_fd(lambda Rp: fn(q, Rp, k).value, R)
            errs.append(rel_err(g.ref_grads, fd))
        worst[label] = max(errs)
    for op in OPS:
        errs = []
        for _ in range(100):
            g, inputs = single_op_graph(op, rng)
            errs.append(max(graph_fd_errors(g, inputs, rng).values()))
        worst[op] = max(errs)
    bad = {k: v for k, v in worst.items() if v >= FD_TOL}
    acceptance(5, "analytic gradients match central differences (step 1e-3)", not bad,
               f"worst {max(worst.values()):.1e} over {len(worst)} x 100 instances" + (f"; failing {bad}" if bad else ""))


def test_06_loss_decomposition(acceptance):
    reports = []
    rng = np.random.default_rng(6)
    for _ in range(1000):
        w = LossWeights(*rng.uniform(0, 1, 3))
        reports.append((total_loss(dict(zip(("ilid", "plid", "adv", "rec"), rng.uniform(-1e3, 1e3, 4))), w), w))
    y = texture_batch(8, 32, 3, seed=6)
    masks = [random_mask(i, (32, 32)) for i in range(8)]
    cfg = ExperimentConfig(seed=6, lr=0.1)
    res = run_inpaint_direct(cfg, y, masks, steps=5)
    reports += [(r, replace(cfg.weights, lambda_A=0.0)) for r in res.reports]
    train = run_train_toy(replace(cfg, steps=3, batch=8), texture_batch(16, 32, 3, seed=6))
    w = cfg.weights
    for row in train.log:
        reports.append((total_loss({k: row[k] for k in ("ilid", "plid", "adv", "rec")}, w), w))
        assert row["total"] == reports[-1][0].total
    worst = max(r.decomposition_error(w) for r, w in reports)
    acceptance(6, "total == weighted sum of parts", worst <= 1e-6,
               f"worst relative gap {worst:.1e} over {len(reports)} reports")


def test_07_gradient_penalty(acceptance):
    rng = np.random.default_rng(7)
    real, fake = rng.random((5, 4, 4)), rng.random((5, 4, 4))
    x_hat = 0.5 * (real + fake)
    unit = np.full(16, 0.25)  # norm exactly 1
    _, d1 = adv_critic_loss(LinearCritic(unit), real, fake, x_hat, lambda_gp=10)
    _, d3 = adv_critic_loss(LinearCritic(3 * unit), real, fake, x_hat, lambda_gp=10)
    per_sample = 10 * (d3.grad_norms - 1) ** 2
    ok = d1.penalty == 0.0 and d3.penalty == 40.0 and np.all(per_sample == 40.0)
    acceptance(7, "unit-norm critic -> 0, norm-3 critic -> 40", ok,
               f"penalties {d1.penalty!r} and {d3.penalty!r}")


def test_08_regularizer_effect(acceptance):
    t0 = time.perf_counter()
    wins, lines = 0, []
    spec = TransformSpec()
    for seed in range(10):
        y = texture_batch(1, 32, 3, seed=seed)[0].astype(np.float64)
        m = random_mask(seed, (32, 32))
        base = ExperimentConfig(seed=seed, weights=LossWeights(0.0, 0.0, 0.0))
        on = run_inpaint_direct(replace(base, weights=LossWeights(0.0, 0.1, 0.0)), y, m, steps=30, lr=0.05)
        off = run_inpaint_direct(base, y, m, steps=30, lr=0.05)
        a = mean_plid_against_original(y, on.restored, m, spec, 5)
        b = mean_plid_against_original(y, off.restored, m, spec, 5)
        wins += a < b
        lines.append(f"{a:.2f}<{b:.2f}" if a < b else f"{a:.2f}>={b:.2f}")
    elapsed = time.perf_counter() - t0
    acceptance(8, "pLID lower with lambda_P=0.1 in >= 9 of 10 seeds, under 5 min",
               wins >= 9 and elapsed < 300, f"{wins}/10 seeds in {elapsed:.1f} s ({', '.join(lines)})")


def _mle(d):
    d = np.sort(d)
    return -1.0 / np.mean(np.log(d / d[-1]))


def test_09_batch_loss_oracles(acceptance):
    rng = np.random.default_rng(9)
    Y, Z = rng.normal(size=(8, 32)), rng.normal(size=(64, 32))
    loop_i = 0.0
    for y in Y:
        d = sorted(float(np.sqrt(np.sum((z - y) ** 2))) for z in Z)[:8]
        loop_i += _mle(np.array(d)) / len(Y)
    P = [rng.normal(size=(36, 18)) for _ in range(8)]
    Q = [rng.normal(size=(20, 18)) for _ in range(8)]
    loop_p = 0.0
    for Pi, Qi in zip(P, Q):
        acc = 0.0
        for p in Pi:
            d = sorted(float(np.sqrt(np.sum((q - p) ** 2))) for q in Qi)[:5]
            acc += _mle(np.array(d))
        loop_p += acc / len(Pi) / len(P)
    gi = abs(ilid_loss(Y, Z, 8) - loop_i) / loop_i
    gp = abs(plid_loss(P, Q, 5) - loop_p) / loop_p
    acceptance(9, "batch ilid_loss / plid_loss equal their double loops", max(gi, gp) <= 1e-6,
               f"relative gaps {gi:.1e} (iLID), {gp:.1e} (pLID)")


RUNS = {
    "lid-estimate": ["--k", "8"],
    "drift-demo": [],
    "dim-recovery": [],
    "inpaint": ["steps=5"],
    "train-toy": ["steps=3", "n_images=16", "batch=8"],
    "ablate": ["steps=3"],
    "metrics": [],
}


def test_10_determinism(acceptance, tmp_path, capsys):
    pts = np.random.default_rng(10).random((200, 4)).astype(np.float32)
    save_tensor(pts, tmp_path / "pts.dt")
    save_image(texture_batch(1, 32, 3, seed=10)[0], tmp_path / "x.png")
    save_image(texture_batch(1, 32, 3, seed=11)[0], tmp_path / "y.png")
    extra = {"lid-estimate": ["--input", str(tmp_path / "pts.dt")],
             "metrics": ["--a", str(tmp_path / "x.png"), "--b", str(tmp_path / "y.png")]}
    compared, mismatched = 0, []
    for verb, args in RUNS.items():
        first, second = tmp_path / verb / "1", tmp_path / verb / "2"
        assert parse_and_dispatch([verb, "--out", str(first), *extra.get(verb, []), *args]) == 0
        assert parse_and_dispatch([verb, "--config", str(first / "manifest.txt"), "--out", str(second)]) == 0
        csvs = sorted(p.relative_to(first) for p in Path(first).glob("*.csv"))
        assert csvs, verb
        for rel in csvs:
            compared += 1
            if (first / rel).read_bytes() != (second / rel).read_bytes():
                mismatched.append(f"{verb}/{rel}")
    capsys.readouterr()
    acceptance(10, "manifest reruns give bit-identical CSVs", not mismatched,
               f"{compared} CSV files over {len(RUNS)} verbs" + (f"; differing {mismatched}" if mismatched else ""))
