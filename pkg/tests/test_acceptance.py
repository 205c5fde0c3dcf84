"""Acceptance gate. Each test carries a ``criterion`` marker; the terminal summary
prints one PASS/FAIL line per criterion.

Criteria 5 and 6 train 9 runs on the default workbench and take most of the
20 minute budget on one CPU core.
"""

import csv
import math
import time
from collections import OrderedDict

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uacseg import classdrop as cd
from uacseg import uncertainty as unc
from uacseg.config import ExperimentConfig, apply_overrides
from uacseg.experiment import ablation_suite, read_eval_curve, run_experiment
from uacseg.losses import RampSchedule, masked_consistency_loss, ramp_weight, supervised_ce
from uacseg.model import SegModelSpec, clone_params, init_params, model_forward
from uacseg.segcore import confusion, miou, normalize
from uacseg.trainer import ema_update

N_CASES = 200
INVARIANTS = "invariants (mask locality, gate / threshold / R monotonicity, EMA shapes, Jensen), 200 cases each"
crit = pytest.mark.criterion


# ---------------------------------------------------------------- criterion 1

@crit(1, "exact values (entropy, threshold endpoint, ramp endpoint, EMA closed form), < 5 s")
def test_exact_values():
    t0 = time.perf_counter()
    for c in (2, 3, 5, 19):
        onehot = np.eye(c)[np.arange(12) % c].reshape(3, 4, c)
        assert np.abs(unc.predictive_entropy(onehot)).max() <= 1e-9
        uniform = np.full((3, 4, c), 1.0 / c)
        assert np.abs(unc.predictive_entropy(uniform) - math.log(c)).max() <= 1e-9

    for alpha, beta, tmax, z in [(0.75, -5.0, 2000, 1.2), (0.5, -2.0, 10, math.log(5)), (0.9, -5.0, 1, 0.3)]:
        sched = unc.ThresholdSchedule(alpha, beta, tmax)
        assert abs(unc.dynamic_threshold(tmax, sched, z) - (alpha + (1 - alpha) * z)) <= 1e-9

    for lam, tmax in [(0.1, 2000), (10.0, 7), (1.0, 1)]:
        assert ramp_weight(tmax, RampSchedule(lam, tmax)) == lam

    rng = np.random.default_rng(0)
    decay, k = 0.97, 100
    teacher0 = OrderedDict(w=torch.tensor(rng.normal(size=(6, 5))), b=torch.tensor(rng.normal(size=7)))
    student = OrderedDict(w=torch.tensor(rng.normal(size=(6, 5))), b=torch.tensor(rng.normal(size=7)))
    teacher = teacher0
    for _ in range(k):
        teacher = ema_update(teacher, student, decay)
    for name in student:
        closed = decay**k * teacher0[name] + (1 - decay**k) * student[name]
        np.testing.assert_allclose(teacher[name].numpy(), closed.numpy(), rtol=1e-6)
    assert time.perf_counter() - t0 < 5.0


# ---------------------------------------------------------------- criterion 2

def random_probs(rng, shape):
    return normalize(rng.normal(size=shape) * 2)


@crit(2, "oracle equivalence (ClassDrop, uncertainty mask, mIoU, average prediction), < 30 s")
def test_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)

    cfg = cd.ClassDropConfig(0.3, 0.9)
    for trial in range(100):
        h, w, c = rng.integers(1, 12), rng.integers(1, 12), int(rng.integers(1, 8))
        pseudo = rng.integers(0, c, size=(h, w))
        if trial % 3 == 0:
            pseudo[rng.random((h, w)) < 0.2] = 255
            pseudo.flat[0] = 0
        out = cd.generate_classdrop_mask(pseudo, cfg, np.random.default_rng(trial))
        present = sorted(set(pseudo.ravel().tolist()) - {255})
        expect_k = min(max(int(math.floor(out.ratio * len(present) + 0.5)), 1), len(present))
        assert len(out.kept_classes) == expect_k and out.kept_classes <= set(present)
        oracle = np.zeros((h, w), dtype=np.uint8)
        for i in range(h):
            for j in range(w):
                oracle[i, j] = 1 if pseudo[i, j] in out.kept_classes else 0
        assert out.mask.dtype == np.uint8 and np.array_equal(out.mask, oracle)

    for _ in range(100):
        h, w = rng.integers(1, 10, size=2)
        ent = rng.random((h, w)) * 2
        R = float(rng.choice([rng.random() * 2, ent.flat[0]]))
        m = unc.uncertainty_mask(ent, R)
        oracle = np.array([[1 if ent[i, j] < R else 0 for j in range(w)] for i in range(h)], dtype=np.uint8)
        assert np.array_equal(m, oracle)

    for _ in range(50):
        c = int(rng.integers(2, 7))
        gt = rng.integers(0, c, size=(rng.integers(2, 9), rng.integers(2, 9)))
        gt[rng.random(gt.shape) < 0.1] = 255
        pred = rng.integers(0, c, size=gt.shape)
        iou, m = miou(confusion(pred, gt, c))
        inter = [0] * c
        union = [0] * c
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == 255:
                continue
            for k in range(c):
                a, b = p == k, g == k
                inter[k] += int(a and b)
                union[k] += int(a or b)
        ref = [inter[k] / union[k] if union[k] else float("nan") for k in range(c)]
        np.testing.assert_allclose(iou, ref, atol=1e-9, equal_nan=True)
        assert abs(m - np.nanmean(ref)) <= 1e-9

    for _ in range(50):
        n = int(rng.integers(1, 10))
        members = [random_probs(rng, (3, 4, 5)) for _ in range(n)]
        acc = np.zeros((3, 4, 5))
        for mem in members:
            acc = acc + mem
        np.testing.assert_allclose(unc.average_prediction(members), acc / n, atol=1e-7)
    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------- criterion 3

def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def loss_on_logits(loss_fn, logits, *args):
    z = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    val = loss_fn(torch.softmax(z, dim=-1), *args)
    val.backward()
    return z.grad.numpy()


def loss_value(loss_fn, logits, *args):
    with torch.no_grad():
        return loss_fn(torch.softmax(torch.tensor(logits, dtype=torch.float64), dim=-1), *args).item()


@crit(3, "loss and model gradients match central finite differences, < 60 s")
def test_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(20):
        logits = rng.normal(size=(4, 4, 3))
        teacher = torch.tensor(random_probs(rng, (4, 4, 3)))
        gate = torch.tensor(rng.integers(0, 2, size=(4, 4)).astype(float))
        labels = torch.tensor(rng.integers(0, 3, size=(4, 4)))
        labels[0, 0] = 255
        for fn, args in [(masked_consistency_loss, (teacher, gate)), (supervised_ce, (labels,))]:
            g = loss_on_logits(fn, logits, *args)
            fd = central_diff(lambda z: loss_value(fn, z, *args), logits)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)

    spec = SegModelSpec(num_classes=3, widths=(4, 6, 8, 8), height=16, width=16, init_seed=3)
    params = clone_params(init_params(spec, dtype=torch.float64), requires_grad=True)
    img = torch.tensor(rng.random((16, 16, 3)), requires_grad=True)
    weights = torch.tensor(rng.normal(size=(16, 16, 3)))

    def objective(p, x):
        return (torch.tanh(model_forward(p, spec, x)) * weights).sum()

    objective(params, img).backward()
    h = 1e-6
    for name in ["down0.weight", "down2.weight", "up0.weight", "head.bias"]:
        flat = params[name].detach().view(-1)
        for k in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            with torch.no_grad():
                orig = flat[k].item()
                flat[k] = orig + h
                fp = objective(params, img).item()
                flat[k] = orig - h
                fm = objective(params, img).item()
                flat[k] = orig
            assert params[name].grad.view(-1)[k].item() == pytest.approx((fp - fm) / (2 * h), rel=1e-3, abs=1e-8)
    x = img.detach()
    for idx in [(0, 0, 0), (8, 5, 1), (15, 15, 2)]:
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (objective(params, xp) - objective(params, xm)).item() / (2 * h)
        assert img.grad[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-8)
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------- criterion 4

dims = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(2, 5))


@st.composite
def prob_pair_and_gate(draw):
    h, w, c = draw(dims)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    s = random_probs(rng, (h, w, c))
    t = random_probs(rng, (h, w, c))
    gate = (rng.random((h, w)) < draw(st.floats(0, 1))).astype(np.uint8)
    return s, t, gate, rng


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(prob_pair_and_gate(), st.sampled_from(["mean_all", "mean_gated"]))
def test_mask_locality(case, reduction):
    s, t, gate, rng = case
    s2 = s.copy()
    off = gate == 0
    s2[off] = random_probs(rng, s2[off].shape)
    a = masked_consistency_loss(torch.tensor(s), torch.tensor(t), torch.tensor(gate), reduction).item()
    b = masked_consistency_loss(torch.tensor(s2), torch.tensor(t), torch.tensor(gate), reduction).item()
    assert a == b


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(prob_pair_and_gate())
def test_gate_monotonicity(case):
    s, t, m_unc, rng = case
    m_cd = (rng.random(m_unc.shape) < 0.5).astype(np.uint8)
    bigger = np.maximum(m_unc, (rng.random(m_unc.shape) < 0.5).astype(np.uint8))
    g_small, g_big = cd.combine_masks(m_cd, m_unc), cd.combine_masks(m_cd, bigger)
    assert np.all(g_small <= m_cd) and np.all(g_small <= m_unc) and np.all(g_small <= g_big)
    loss = lambda g: masked_consistency_loss(torch.tensor(s), torch.tensor(t), torch.tensor(g)).item()
    assert loss(g_small) <= loss(g_big)


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-20, -0.01), st.integers(1, 5000), st.floats(0, 5), st.data())
def test_threshold_monotone(alpha, beta, tmax, z, data):
    t1 = data.draw(st.integers(0, tmax))
    t2 = data.draw(st.integers(t1, tmax))
    sched = unc.ThresholdSchedule(alpha, beta, tmax)
    assert unc.dynamic_threshold(t1, sched, z) <= unc.dynamic_threshold(t2, sched, z)


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 3)),
       st.floats(0, 3), st.floats(0, 3))
def test_mask_monotone_in_R(ent, r1, r2):
    lo, hi = sorted((r1, r2))
    assert np.all(unc.uncertainty_mask(ent, lo) <= unc.uncertainty_mask(ent, hi))


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(st.lists(hnp.array_shapes(min_dims=0, max_dims=4, max_side=4), min_size=1, max_size=5),
       st.floats(0, 1), st.sampled_from([torch.float32, torch.float64]))
def test_ema_shapes(shapes, decay, dtype):
    teacher = OrderedDict((f"p{i}", torch.zeros(s, dtype=dtype)) for i, s in enumerate(shapes))
    student = OrderedDict((f"p{i}", torch.ones(s, dtype=dtype)) for i, s in enumerate(shapes))
    new = ema_update(teacher, student, decay)
    assert list(new) == list(teacher)
    for k in teacher:
        assert new[k].shape == teacher[k].shape and new[k].dtype == dtype


@crit(4, INVARIANTS)
@settings(max_examples=N_CASES, deadline=None)
@given(st.integers(1, 9), dims, st.integers(0, 2**32 - 1), st.floats(0.1, 8))
def test_jensen(n, shape, seed, scale):
    rng = np.random.default_rng(seed)
    members = normalize(rng.normal(size=(n, *shape)) * scale)
    h_mean = unc.predictive_entropy(unc.average_prediction(members))
    mean_h = np.mean([unc.predictive_entropy(m) for m in members], axis=0)
    assert np.all(h_mean >= mean_h - 1e-9)


# ------------------------------------------------------------ criteria 5 and 6

METHODS = ["source_only", "mean_teacher", "full"]
SEEDS = (1, 2, 3)
BUDGET_S = 20 * 60


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = apply_overrides(ExperimentConfig(name="desk"), {"data.root": str(root / "data")})
    t0 = time.perf_counter()
    rows = ablation_suite(cfg, {"method": METHODS}, seeds=SEEDS, out_dir=root / "ablation")
    elapsed = time.perf_counter() - t0
    by_method = {r["method"]: r for r in rows}
    for name in METHODS:
        r = by_method[name]
        print(f"{name:13s} final mIoU mean {r['mean']:.4f} min {r['min']:.4f} max {r['max']:.4f} per seed {r['per_seed']}")
    print(f"desk ablation wall time {elapsed:.0f} s")
    return by_method, root / "ablation", elapsed


@crit(5, "desk ablation: full > source-only (mean, >= 2/3 seeds) and full >= Mean Teacher, <= 20 min")
def test_desk_ablation_ordering(desk_ablation):
    rows, _, elapsed = desk_ablation
    for r in rows.values():
        assert not r["missing"], f"runs failed: {r['missing']}"
    full, so, mt = (rows[m]["per_seed"] for m in ("full", "source_only", "mean_teacher"))
    gaps = [full[s] - so[s] for s in SEEDS]
    assert np.mean(gaps) > 0, gaps
    assert sum(g > 0 for g in gaps) >= 2, gaps
    assert rows["full"]["mean"] >= rows["mean_teacher"]["mean"]
    assert elapsed <= BUDGET_S, f"{elapsed:.0f} s"


@crit(6, "full-method mIoU curve never drops below 90% of its running max after the ramp-up midpoint")
def test_full_method_stability(desk_ablation):
    _, out, _ = desk_ablation
    t_max = ExperimentConfig().train.t_max
    for s in SEEDS:
        steps, m, _ = read_eval_curve(out / "method=full" / f"seed{s}")
        running = np.maximum.accumulate(m)
        late = steps >= t_max / 2
        worst = float(np.min(m[late] / running[late]))
        assert worst >= 0.9, f"seed {s}: curve fell to {worst:.3f} of its running max"


# ---------------------------------------------------------------- criterion 7

def short_config(root):
    return apply_overrides(ExperimentConfig(name="det"), {
        "data.root": str(root / "data"),
        "data.scene.height": 32, "data.scene.width": 32,
        "data.counts": {"source": 16, "target_train": 16, "target_eval": 8},
        "train.t_max": 40, "train.eval_every": 10, "train.batch_size": 4,
        "augment.crop_size": [24, 24],
    })


@crit(7, "identical config and seed give byte-identical metrics CSVs and equal summary digests")
def test_determinism(tmp_path):
    import json

    cfg = short_config(tmp_path)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "eval.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    sa, sb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    assert sa["summary_digest"] == sb["summary_digest"]
    assert sa["metrics_digest"] == sb["metrics_digest"]
    with open(a / "metrics.csv") as f:
        assert len(list(csv.DictReader(f))) == 40
