"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Criteria 6-8 train real models on a 200-case synthetic benchmark and take
roughly half an hour on one CPU core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import naive_dice, naive_e_measure_mean, naive_s_measure, naive_weighted_fbeta, random_instance
from polypdiff import engine
from polypdiff import losses as L
from polypdiff.codec import binarize, decode_pred, encode_mask
from polypdiff.data import SyntheticConfig, generate_synthetic, load_dataset
from polypdiff.engine import apply_overrides
from polypdiff.metrics import dice, e_measure_mean, s_measure, weighted_fbeta
from polypdiff.networks import MultiTaskPrediction, PolypDiffusionNet
from polypdiff.schedule import forward_diffuse, make_schedule

DESK_INI = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
BENCH = SyntheticConfig(n_cases=200, frames_per_case=16, height=64, width=64)
SEED = 0


# 1 ---------------------------------------------------------------------------

def test_1_forward_process_moments(acceptance_line):
    start = time.perf_counter()
    s = make_schedule("linear", 1000, 1e-4, 0.02)
    rng = np.random.default_rng(2024)
    n = 10_000
    worst_mean, worst_var = 0.0, 0.0
    for _ in range(5):
        z0 = rng.uniform(-1, 1, size=(1, 8, 8))
        t = int(rng.integers(0, 1000))
        eps = rng.standard_normal((n, 1, 8, 8))
        draws = forward_diffuse(np.broadcast_to(z0, eps.shape), t, eps, s)
        abar = s.alpha_bars[t]
        sigma = math.sqrt(1 - abar)
        worst_mean = max(worst_mean, np.abs(draws.mean(0) - math.sqrt(abar) * z0).max() / (4 * sigma / math.sqrt(n)))
        worst_var = max(worst_var, np.abs(draws.var(0) / (1 - abar) - 1).max() / 0.10)
    elapsed = time.perf_counter() - start
    ok = worst_mean <= 1 and worst_var <= 1 and elapsed < 30
    acceptance_line(1, ok, f"mean dev {worst_mean:.2f} x (4 sigma/sqrt N), var dev {worst_var:.2f} x 10%, "
                           f"{elapsed:.1f}s (< 30s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_2_oracle_denoiser_chain(acceptance_line):
    start = time.perf_counter()
    cfg = apply_overrides(engine.TrainConfig(), {"model.channels": (8, 16, 32, 64), "model.encoder": "conv"})
    model = PolypDiffusionNet(cfg.model)
    schedule = cfg.diffusion.schedule()
    rng = np.random.default_rng(7)
    scores = []
    for k in range(20):
        blocks = rng.random((16, 16)) < rng.uniform(0.1, 0.6)
        mask = np.kron(blocks, np.ones((4, 4), bool)).astype(np.uint8)
        z0 = torch.from_numpy(encode_mask(mask))[None].float()

        def head(z, prior, t, z0=z0):
            return z0, MultiTaskPrediction(torch.zeros(1, 1, 64, 64), torch.zeros(1, 6), torch.zeros(1, 4))

        for K in (1, 5, 10):
            z_T = torch.randn(z0.shape, generator=torch.Generator().manual_seed(100 * k + K))
            _, z_final = engine.sample_chain(model, None, None, schedule, K, z_T, head=head)
            scores.append(dice(binarize(decode_pred(z_final[0].numpy(), 1.0, 64, 64)), mask))
    elapsed = time.perf_counter() - start
    ok = min(scores) == 1.0 and elapsed < 10
    acceptance_line(2, ok, f"min Dice {min(scores):.6f} over 20 masks x K in {{1,5,10}}, {elapsed:.1f}s (< 10s)")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_3_metric_oracles(acceptance_line):
    start = time.perf_counter()
    rng = np.random.default_rng(31337)
    worst = {"dice": 0.0, "s_measure": 0.0, "e_measure_mean": 0.0, "weighted_fbeta": 0.0}
    degenerate = 0
    for _ in range(1000):
        prob, gt = random_instance(rng, size=16)
        degenerate += int(not gt.any() or gt.all())
        pred = prob >= 0.5
        worst["dice"] = max(worst["dice"], abs(dice(pred, gt) - naive_dice(pred, gt)))
        worst["s_measure"] = max(worst["s_measure"], abs(s_measure(prob, gt) - naive_s_measure(prob, gt)))
        worst["e_measure_mean"] = max(worst["e_measure_mean"],
                                      abs(e_measure_mean(prob, gt) - naive_e_measure_mean(prob, gt)))
        worst["weighted_fbeta"] = max(worst["weighted_fbeta"],
                                      abs(weighted_fbeta(prob, gt) - naive_weighted_fbeta(prob, gt)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and degenerate > 0 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_line(3, ok, f"max |diff| {detail} (<= 1e-6); {degenerate} degenerate GTs; {elapsed:.0f}s (< 120s)")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_4_closed_form_losses(acceptance_line):
    d = float(L.disc_loss(0.5, 0.5))
    gt = (torch.rand(1, 1, 16, 16, generator=torch.Generator().manual_seed(0)) < 0.4).double()
    ce = float(L.bce(torch.full_like(gt, 0.5), gt))
    tot = float(L.total_loss(1.0, 1.0))
    ok = abs(d - 1.386294) <= 1e-6 and abs(ce - math.log(2)) <= 1e-6 and tot == 1.0
    acceptance_line(4, ok, f"disc_loss(0.5,0.5)={d:.7f}, uniform CE={ce:.7f} (ln2={math.log(2):.7f}), "
                           f"total_loss(1,1)={tot!r}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_5_gradient_check(acceptance_line):
    start = time.perf_counter()
    cfg = apply_overrides(engine.TrainConfig(), {
        "model.channels": (8, 16, 32, 64), "model.head_dim": 16, "model.recon_dim": 8,
        "model.disc_channels": (8, 8, 16, 16), "model.image_size": 32, "patch_size": 32})
    torch.manual_seed(0)
    model = PolypDiffusionNet(cfg.model).double()
    g = torch.Generator().manual_seed(1)
    yy, xx = torch.meshgrid(torch.arange(32), torch.arange(32), indexing="ij")
    mask = (((yy - 14) ** 2 + (xx - 17) ** 2) < 60).double()[None, None].repeat(2, 1, 1, 1)
    batch = {"target": torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1,
             "prev": torch.rand(2, 4, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1,
             "mask": mask, "cls": torch.tensor([1, 4]),
             "box": torch.tensor([[0.53, 0.44, 0.47, 0.47]] * 2, dtype=torch.float64)}
    schedule = cfg.diffusion.schedule()
    t = torch.tensor([10, 600])
    eps = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)

    def loss():
        return engine.compute_losses(model, cfg, batch, schedule, t, eps)[0]

    model.zero_grad()
    loss().backward()
    params = list(model.named_parameters())
    rng = np.random.default_rng(0)
    picked = set()
    while len(picked) < 120:
        i = int(rng.integers(len(params)))
        picked.add((i, int(rng.integers(params[i][1].numel()))))
    h, worst, worst_name = 1e-4, 0.0, ""
    for i, j in sorted(picked):
        name, p = params[i]
        flat = p.data.view(-1)
        old = float(flat[j])
        with torch.no_grad():
            flat[j] = old + h
            up = float(loss())
            flat[j] = old - h
            down = float(loss())
            flat[j] = old
        num, ana = (up - down) / (2 * h), float(p.grad.view(-1)[j])
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 300
    acceptance_line(5, ok, f"{len(picked)} parameters, max relative error {worst:.2e} ({worst_name}), "
                           f"{elapsed:.0f}s (< 300s)")
    assert ok


# 6-8: trained models ----------------------------------------------------------

@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench") / "synthetic"
    generate_synthetic(BENCH, root, seed=SEED)
    return load_dataset(root)


@pytest.fixture(scope="module")
def desk_cfg():
    return apply_overrides(engine.load_config(DESK_INI), {"seed": SEED})


@pytest.fixture(scope="module")
def full_run(bench, desk_cfg, tmp_path_factory):
    torch.set_num_threads(1)
    out = tmp_path_factory.mktemp("full")
    start = time.perf_counter()
    res = engine.train(desk_cfg, bench, out)
    report, scores = engine.evaluate(res.state, bench, seed=SEED)
    return res, report, scores, time.perf_counter() - start


@pytest.mark.slow
def test_6_end_to_end_training(full_run, bench, acceptance_line):
    res, report, scores, elapsed = full_run
    seen = engine.pooled(scores, bench, "seen")
    unseen = engine.pooled(scores, bench, "unseen")
    gap = seen["dice"] - unseen["dice"]
    ok = seen["dice"] >= 0.80 and seen["s_alpha"] >= 0.80 and gap <= 0.15 and elapsed <= 20 * 60
    acceptance_line(6, ok, f"seen Dice {seen['dice']:.3f} S_alpha {seen['s_alpha']:.3f} (>= 0.80), "
                           f"unseen Dice {unseen['dice']:.3f} (gap {gap:+.3f} <= 0.15), "
                           f"{res.state.step} steps, {elapsed / 60:.1f} min (<= 20 min)")
    print(report.to_csv())
    assert ok


@pytest.mark.slow
def test_step_count_trend(full_run, bench):
    """K=10 is at least as good as K=1 on the seen split of the trained model."""
    res = full_run[0]
    seen = ["easy-seen", "hard-seen"]
    dices = {}
    for K in (1, 10):
        _, scores = engine.evaluate(res.state, bench, splits=seen, seed=SEED, K=K)
        assert all(np.isfinite([s.dice for s in scores]))
        dices[K] = float(np.mean([s.dice for s in scores]))
    print(f"seen-split Dice: K=1 {dices[1]:.4f}, K=10 {dices[10]:.4f}")
    assert dices[10] >= dices[1]


@pytest.mark.slow
def test_7_ablation_ordering(full_run, bench, desk_cfg, acceptance_line):
    start = time.perf_counter()
    results = engine.run_ablation(desk_cfg, bench, names=["#1", "#2", "#3", "#4"])
    results["full"] = (full_run[1], full_run[2])
    elapsed = time.perf_counter() - start + full_run[3]
    d = {name: float(np.mean([s.dice for s in scores])) for name, (_, scores) in results.items()}
    chain_ok = d["full"] >= d["#4"] >= d["#3"] >= d["#1"] and d["full"] >= d["#2"] >= d["#1"]
    gap = d["full"] - d["#1"]
    ok = chain_ok and gap >= 0.01 and elapsed <= 2 * 3600
    table = ", ".join(f"{k} {v:.4f}" for k, v in d.items())
    acceptance_line(7, ok, f"mean Dice {table}; full-#1 {gap:+.4f} (>= 0.01); ordering "
                           f"{'holds' if chain_ok else 'violated'}; {elapsed / 60:.0f} min (<= 120 min)")
    print(engine.ablation_table(results))
    assert ok


@pytest.mark.slow
def test_8_determinism(bench, desk_cfg, tmp_path, acceptance_line):
    cfg = apply_overrides(desk_cfg, {"max_steps": 200})
    reports = []
    for name in ("a", "b"):
        res = engine.train(cfg, bench, tmp_path / name)
        reports.append(engine.evaluate(res.state, bench, seed=SEED)[0].to_json())
    same_ckpt = (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    same_log = (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()
    ok = same_ckpt and same_log and reports[0] == reports[1]
    acceptance_line(8, ok, f"200-step checkpoints identical: {same_ckpt}, logs identical: {same_log}, "
                           f"reports identical: {reports[0] == reports[1]}")
    assert ok
