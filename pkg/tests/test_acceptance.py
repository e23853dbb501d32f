"""Acceptance suite: one test per criterion, at the stated tolerances and time limits.

The terminal summary prints one PASS/FAIL line per criterion (see conftest.py).
Criteria 7 and 9 run the full desk-scale pipeline through the CLI and take
roughly half an hour on one CPU core.
"""
import csv
import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch

from helpers import FlopCounter, fd_check, fd_check_batched, random_batch
from pam.cli import main
from pam.losses import (
    LossWeights,
    alpha_loss,
    charbonnier,
    compositional_loss,
    distillation_loss,
    l1_alpha,
    laplacian_loss,
    laplacian_pyramid,
    metric_suite,
    path_loss,
)
from pam.pathlearn import (
    candidate_set,
    draw_from_prior,
    estimate_prior,
    generate_label,
    gumbel_noise,
    prior_from_errors,
    relax,
)
from pam.pathspace import Path, cost_bounds, enumerate_paths, layer_flops, path_cost
from pam.supernet import ConnectLayer, PathSelectionLayer, SupernetConfig, build, cost_table, layer_specs
from pam.synthdata import Batch, DataConfig, MattingDataset
from pam.trainer import TrainConfig, budget_fraction, evaluate_model, run_stage2

CONFIG = SupernetConfig()
TABLE = cost_table(CONFIG)
C_MIN, C_MAX = cost_bounds(TABLE)
ALL = enumerate_paths(4)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# --- 1. cost model ---------------------------------------------------------------------


def _hand_flops(spec):
    hw = spec.out_height * spec.out_width
    macs = {
        "regular-conv": spec.kernel_size**2 * spec.in_channels * spec.out_channels * hw,
        "depthwise-conv": spec.kernel_size**2 * spec.in_channels * hw,
        "pointwise-conv": spec.in_channels * spec.out_channels * hw,
        "mlp": spec.in_channels * spec.out_channels,
    }
    return 2 * macs.get(spec.kind, 0)


@pytest.mark.acceptance(1, "cost-model exactness")
def test_c1_cost_model_exact():
    start = time.perf_counter()
    assert path_cost(Path.all_execute(4), TABLE) - path_cost(Path.all_bypass(4), TABLE) == 8_978_432
    specs = layer_specs(CONFIG)
    layers = specs["fixed"] + [s for group in specs["execute"] + specs["bypass"] for s in group]
    assert all(layer_flops(s) == _hand_flops(s) for s in layers)
    # per-stage closed forms on the 16x16 feature map
    hw = 16 * 16
    for i in range(4):
        assert TABLE.execute[i] == 2 * (25 * 32 + 32 * 64 + 64 * 32) * hw
        assert TABLE.bypass[i] == 2 * (32 * 8 + 8 * 32) * hw
    # the instrumented network performs exactly the tabulated work on every path
    model = build(CONFIG, 0).to_model()
    image, trimap = random_batch(CONFIG, batch=1)
    for path in ALL:
        counter = FlopCounter(model)
        with torch.no_grad():
            model.forward_path(image, trimap, path)
        counter.close()
        assert counter.total == path_cost(path, TABLE)
    assert time.perf_counter() - start < 1.0


# --- 2. label generation ---------------------------------------------------------------


def _brute_force(cands, errors, v, e_v, c_v, c_g):
    pool = ([(v, e_v)] if c_v < c_g else []) + list(zip(cands, errors))
    best = min(e for _, e in pool)
    return next(p for p, e in pool if e == best), best


@pytest.mark.acceptance(2, "label-rule agreement with brute force")
def test_c2_label_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    ties = infeasible = 0
    for trial in range(1000):
        k = int(rng.integers(1, 5))
        cands = [ALL[i] for i in rng.choice(16, size=k, replace=False)]
        # coarse error grid makes ties common
        errors = [float(e) for e in rng.choice([0.1, 0.2, 0.3], size=k)]
        v = ALL[int(rng.integers(16))]
        e_v = float(rng.choice([0.1, 0.2, 0.3]))
        c_v = path_cost(v, TABLE)
        c_g = int(rng.integers(C_MIN, C_MAX + 1)) if trial % 4 else c_v  # boundary: C_v == C_g is infeasible
        d = generate_label(cands, errors, v, e_v, c_v, c_g)
        assert (d.label, d.label_error) == _brute_force(cands, errors, v, e_v, c_v, c_g)
        ties += len(set(errors + [e_v])) < k + 1
        infeasible += c_v >= c_g
    assert ties > 100 and infeasible > 100
    assert time.perf_counter() - start < 5.0


# --- 3. gradients ----------------------------------------------------------------------


def _kink_free(rng, margin=1e-3):
    """Random 8x8 loss instance with every |residual| at least ``margin`` (Charbonnier is smooth there)."""
    while True:
        t = lambda *s: torch.tensor(rng.uniform(size=s))
        gt, fg, bg, image, teacher, x = (t(1, c, 8, 8) for c in (1, 3, 3, 3, 1, 1))
        region = torch.tensor(rng.uniform(size=(1, 1, 8, 8)) < 0.6)
        residuals = [x - gt, x - teacher, image - (x * fg + (1 - x) * bg)]
        residuals += [p - g for p, g in zip(laplacian_pyramid(x, 4), laplacian_pyramid(gt, 4))]
        if min(float(r.abs().min()) for r in residuals) > margin:
            return gt, fg, bg, image, teacher, region, x


def _relu_safe(pre, margin=1e-3):
    return float(pre.abs().min()) > margin


@pytest.mark.acceptance(3, "finite-difference gradient suite")
def test_c3_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for draw in range(100):
        checks = []
        # soft Gumbel path
        noise = gumbel_noise(rng, (4, 2))
        tau = float(rng.uniform(0.3, 2.0))
        w = torch.tensor(rng.normal(size=(4, 2)))
        checks.append(fd_check(lambda lg: (relax(lg, noise, tau)[0] * w).sum(), torch.tensor(rng.normal(size=(4, 2)))))
        # every loss
        gt, fg, bg, image, teacher, region, x = _kink_free(rng)
        checks.append(fd_check(lambda p: l1_alpha(p, gt, region), x))
        checks.append(fd_check(lambda p: compositional_loss(p, fg, bg, image, region), x))
        checks.append(fd_check(lambda p: laplacian_loss(p, gt, levels=4), x))
        checks.append(fd_check(lambda p: distillation_loss(p, teacher, region), x))
        checks.append(fd_check(lambda p: charbonnier(p - gt, eps=1e-6).sum(), x))
        label = torch.tensor(rng.integers(0, 2, size=(1, 4)))
        checks.append(fd_check(lambda lg: path_loss(list(lg.unbind(1)), label), torch.tensor(rng.normal(size=(1, 4, 2)))))
        # selection and connect layers (ReLU inputs kept clear of zero)
        torch.manual_seed(draw)
        select = PathSelectionLayer(32, 8, 16, 32).double()
        connect = ConnectLayer(32, 8).double()
        while True:
            feat = torch.tensor(rng.normal(size=(1, 32, 8, 8)))
            fc = torch.tensor(rng.normal(size=(1, 16)))
            with torch.no_grad():
                gs_pre = select.squeeze(feat.mean((2, 3), keepdim=True))
                gs = torch.relu(gs_pre).flatten(1)
                hidden_pre = select.mlp[0](torch.cat([gs, fc], 1))
                safe = _relu_safe(gs_pre) and _relu_safe(hidden_pre) and _relu_safe(connect.reduce(feat))
            if safe:
                break
        wf = torch.tensor(rng.normal(size=(1, 32, 8, 8)))
        wl = torch.tensor(rng.normal(size=(1, 2)))

        def select_fn(f):
            refined, logits = select(f, fc.expand(len(f), -1))
            return (refined * wf).sum((1, 2, 3)) + (logits * wl).sum(1)

        checks.append(fd_check_batched(select_fn, feat))
        checks.append(fd_check_batched(lambda f: (connect(f) * wf).sum((1, 2, 3)), feat))
        worst = max(worst, *checks)
    assert worst < 1e-3, worst
    assert time.perf_counter() - start < 120.0


# --- 4. feasibility --------------------------------------------------------------------


@pytest.mark.acceptance(4, "budget feasibility of candidates, prior draws and inference")
def test_c4_feasibility():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    prior = prior_from_errors(rng.uniform(size=(500, 16)), TABLE, 64, 10)
    model = build(CONFIG, 0).to_model()
    # a spread of logit margins so the projection has real work to do
    with torch.no_grad():
        for sel in model.selectors:
            sel.mlp[2].bias.copy_(torch.tensor([0.0, 2.0]))
    image, trimap = random_batch(CONFIG, batch=2)
    budgets = rng.integers(C_MIN, C_MAX + 1, size=1000)
    budgets[:2] = (C_MIN, C_MAX)
    for budget in budgets.tolist():
        assert all(path_cost(p, TABLE) <= budget for p in candidate_set(budget, TABLE, 10))
        assert all(path_cost(p, TABLE) <= budget for p in draw_from_prior(prior, budget, 4, rng))
        with torch.no_grad():
            out = model.forward_budgeted(image, trimap, budget)
        assert all(path_cost(p, TABLE) <= budget for p in out.paths)
    assert time.perf_counter() - start < 60.0


# --- 5. prior convergence --------------------------------------------------------------


class OracleNet:
    """Prediction = ground truth plus a per-sample, per-path offset (sample id in image channel 1)."""

    def __init__(self, offsets):
        self.offsets = offsets

    def forward_path(self, image, trimap, path):
        ids = image[:, 1, 0, 0].long().tolist()
        off = torch.tensor([self.offsets[i, path.index] for i in ids], dtype=image.dtype)
        return image[:, :1] + off.view(-1, 1, 1, 1)


def _oracle_batch(n, size=4):
    alpha = torch.full((n, 1, size, size), 0.5, dtype=torch.float64)
    image = torch.zeros(n, 3, size, size, dtype=torch.float64)
    image[:, :1] = alpha
    image[:, 1] = torch.arange(n, dtype=torch.float64).view(-1, 1, 1)
    trimap = torch.full((n, 1, size, size), 0.5, dtype=torch.float64)
    return Batch(image, trimap, alpha, image.clone(), image.clone())


@pytest.mark.acceptance(5, "prior convergence (seeded and deterministic oracles)")
def test_c5_prior_convergence():
    start = time.perf_counter()
    n = 1000
    rng = np.random.default_rng(5)
    # (0,1,1,1) and (1,0,1,1) are both among the top-bucket candidates; every other path is clearly worse
    a, b = Path((0, 1, 1, 1)), Path((1, 0, 1, 1))
    offsets = np.full((n, 16), 0.3)
    wins = rng.uniform(size=n) < 0.7
    offsets[:, a.index] = np.where(wins, 0.1, 0.2)
    offsets[:, b.index] = np.where(wins, 0.2, 0.1)
    prior = estimate_prior(OracleNet(offsets), [_oracle_batch(n)], TABLE, 64, 10)
    assert abs(prior.buckets[63].probs[a.index] - 0.7) < 0.044
    offsets[:, a.index], offsets[:, b.index] = 0.1, 0.2
    prior = estimate_prior(OracleNet(offsets), [_oracle_batch(n)], TABLE, 64, 10)
    assert prior.buckets[63].probs == {a.index: 1.0}
    assert time.perf_counter() - start < 60.0


# --- 6. uniform warm-up ----------------------------------------------------------------


@pytest.mark.acceptance(6, "uniform single-path warm-up sampling")
def test_c6_uniform_warmup():
    start = time.perf_counter()
    n_iter = 8000
    config = TrainConfig(stage2_epochs=1, batch_size=1, train_size=n_iter)
    data = MattingDataset(6, n_iter, DataConfig(), "train")
    result = run_stage2(build(CONFIG, 0), config, data)
    hist = np.array(result.info["path_histogram"])
    assert hist.sum() == n_iter
    sigma = math.sqrt(n_iter * (1 / 16) * (15 / 16))
    assert np.all(np.abs(hist - n_iter / 16) < 3 * sigma), hist
    assert time.perf_counter() - start < 600.0


# --- 7 and 9. desk-scale pipeline ------------------------------------------------------


def _cli(*argv):
    code = main(["--workers", "1"] + [str(a) for a in argv])
    assert code == 0, argv


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The full pipeline at default settings: 64x64, 2000 samples, epochs 20/5/20, one worker."""
    d = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    _cli("train", "--stage", 1, "--out", d / "s1.ckpt")
    _cli("train", "--stage", 2, "--in", d / "s1.ckpt", "--out", d / "s2.ckpt")
    _cli("estimate-prior", "--checkpoint", d / "s2.ckpt", "--out", d / "prior.csv")
    _cli("train", "--stage", 3, "--in", d / "s2.ckpt", "--prior", d / "prior.csv", "--teacher", d / "s1.ckpt",
         "--out", d / "s3.ckpt")
    _cli("eval", "--checkpoint", d / "s3.ckpt", "--budgets", f"{C_MAX},95%,65%", "--out", d / "eval.csv")
    elapsed = time.perf_counter() - start
    return d, elapsed


@pytest.mark.acceptance(7, "end-to-end desk training")
def test_c7_desk_training(desk_run):
    d, elapsed = desk_run
    rows = {int(r["budget"]): float(r["l1_unknown"]) for r in csv.DictReader(open(d / "eval.csv"))}
    eval_data = MattingDataset(0, TrainConfig().eval_size, DataConfig(), "eval")
    baseline = evaluate_model(build(CONFIG, TrainConfig().seed).to_model(), eval_data, [C_MAX])[0]["l1_unknown"]
    l1_max = rows[C_MAX]
    l1_95 = rows[budget_fraction(0.95, (C_MIN, C_MAX))]
    l1_65 = rows[budget_fraction(0.65, (C_MIN, C_MAX))]
    print(f"\ndesk pipeline {elapsed / 60:.1f} min; L1 untrained {baseline:.4f}, C_max {l1_max:.4f}, "
          f"95% {l1_95:.4f}, 65% {l1_65:.4f}")
    assert elapsed < 30 * 60
    assert l1_max <= 0.5 * baseline
    assert l1_95 <= l1_65 + 0.005


@pytest.mark.acceptance(9, "byte-identical reruns")
def test_c9_reproducibility(desk_run, tmp_path):
    start = time.perf_counter()
    d, _ = desk_run
    # full-scale rerun of stage 2 and of the prior estimate against the pipeline's own outputs
    _cli("train", "--stage", 2, "--in", d / "s1.ckpt", "--out", tmp_path / "s2.ckpt")
    assert sha(tmp_path / "s2.ckpt") == sha(d / "s2.ckpt")
    assert (tmp_path / "s2.ckpt.log.csv").read_bytes() == (d / "s2.ckpt.log.csv").read_bytes()
    assert (tmp_path / "s2.ckpt.info.json").read_bytes() == (d / "s2.ckpt.info.json").read_bytes()
    _cli("estimate-prior", "--checkpoint", d / "s2.ckpt", "--out", tmp_path / "prior.csv")
    assert sha(tmp_path / "prior.csv") == sha(d / "prior.csv")
    # every stage twice at reduced scale
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"stage1_epochs": 2, "stage2_epochs": 1, "stage3_epochs": 2, "train_size": 64,
                               "n_val": 32}))
    for run in ("a", "b"):
        r = tmp_path / run
        r.mkdir()
        _cli("train", "--stage", 1, "--config", cfg, "--out", r / "s1.ckpt")
        _cli("train", "--stage", 2, "--config", cfg, "--in", r / "s1.ckpt", "--out", r / "s2.ckpt")
        _cli("estimate-prior", "--config", cfg, "--checkpoint", r / "s2.ckpt", "--out", r / "prior.csv")
        _cli("train", "--stage", 3, "--config", cfg, "--in", r / "s2.ckpt", "--prior", r / "prior.csv",
             "--teacher", r / "s1.ckpt", "--out", r / "s3.ckpt")
    for name in ("s1.ckpt", "s1.ckpt.log.csv", "s2.ckpt", "s2.ckpt.log.csv", "prior.csv", "s3.ckpt", "s3.ckpt.log.csv"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name), name
    assert time.perf_counter() - start < 35 * 60


# --- 8. floors and zeros ---------------------------------------------------------------


@pytest.mark.acceptance(8, "loss floors and metric zeros")
def test_c8_floors_and_zeros():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    eps = 1e-6
    gt = torch.tensor(rng.uniform(size=(2, 1, 16, 16)))
    fg, bg = torch.tensor(rng.uniform(size=(2, 3, 16, 16))), torch.tensor(rng.uniform(size=(2, 3, 16, 16)))
    image = gt * fg + (1 - gt) * bg
    region = torch.tensor(rng.uniform(size=(2, 1, 16, 16)) < 0.5)
    assert float(l1_alpha(gt, gt, region, eps)) == pytest.approx(eps, abs=1e-15)
    assert float(compositional_loss(gt, fg, bg, image, region, eps)) == pytest.approx(eps, abs=1e-15)
    assert float(distillation_loss(gt, gt.clone(), region, eps)) == pytest.approx(eps, abs=1e-15)
    weights = LossWeights(eps=eps)
    total = float(alpha_loss(gt, gt, fg, bg, image, region, weights))
    assert total == pytest.approx(eps * (weights.l1 + weights.comp), abs=1e-15)
    assert float(laplacian_loss(gt, gt)) == 0.0
    a = rng.uniform(size=(32, 32))
    trimap = np.where(rng.uniform(size=(32, 32)) < 0.5, 0.5, 1.0)
    assert tuple(metric_suite(a, a, trimap).values()) == (0.0, 0.0, 0.0, 0.0)
    uniform = [torch.zeros(1, 2, dtype=torch.float64)] * 4
    assert float(path_loss(uniform, Path((1, 0, 1, 0)))) == pytest.approx(4 * math.log(2), abs=1e-6)
    assert time.perf_counter() - start < 1.0
