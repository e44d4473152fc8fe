"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line to the terminal (bypassing
capture) before asserting, so ``pytest -v`` output doubles as a report.
"""
import math
import time

import numpy as np
import pytest
import torch

from regionvlp.alignment import compute_bundle, info_nce, refine_weights, total_loss
from regionvlp.cost import estimate_cost
from regionvlp.dataset_io import read_dataset, write_dataset
from regionvlp.retrieval import evaluate_retrieval
from regionvlp.synthetic import (
    PLANTED_FIT,
    brute_force_bundle,
    generate_planted_dataset,
    planted_alignment_accuracy,
    planted_model_config,
)
from regionvlp.training import (
    FINETUNE_SCHEDULE,
    PRETRAIN_SCHEDULE,
    Schedule,
    fit,
    load_checkpoint,
    lr_at_epoch,
    save_checkpoint,
)

D = torch.float64


@pytest.fixture
def report(capsys):
    def emit(name, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed

    return emit


def full_masks(b, n, l):
    return torch.ones(b, n, dtype=torch.bool), torch.ones(b, l, dtype=torch.bool)


# ---------------------------------------------------------------------------
# gradient check


def _loss_fn(rm, wm, sigma, keep):
    def f(r, t):
        bundle = compute_bundle(r, t, rm, wm, frozen_keep=keep)
        return total_loss(bundle, sigma)[0]

    return f


def _central_difference(f, r, t, h):
    grads = []
    for x in (r, t):
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = f(r, t).item()
            flat[k] = old - h
            down = f(r, t).item()
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_gradient_check(report):
    b, n, l, d, h, sigma = 4, 5, 6, 8, 1e-5, 0.05
    rm, wm = full_masks(b, n, l)
    worst = 0.0
    start = time.perf_counter()
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        r = torch.randn(b, n + 1, d, generator=g, dtype=D)
        t = torch.randn(b, l + 1, d, generator=g, dtype=D)
        base = compute_bundle(r, t, rm, wm)
        keep = (base.keep_v2l, base.keep_l2v)
        f = _loss_fn(rm, wm, sigma, keep)
        ra, ta = r.clone().requires_grad_(True), t.clone().requires_grad_(True)
        f(ra, ta).backward()
        with torch.no_grad():
            fr, ft = _central_difference(f, r.clone(), t.clone(), h)
        analytic = torch.cat([ra.grad.reshape(-1), ta.grad.reshape(-1)])
        numeric = torch.cat([fr.reshape(-1), ft.reshape(-1)])
        scale = max(float(analytic.abs().max()), float(numeric.abs().max()))
        worst = max(worst, float((analytic - numeric).abs().max()) / scale)
    elapsed = time.perf_counter() - start
    passed = worst < 1e-5 and elapsed < 30
    report("gradient check", passed, f"max relative error {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 30s)")
    assert passed


# ---------------------------------------------------------------------------
# oracle equivalence


def test_oracle_equivalence(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    start = time.perf_counter()
    for k in range(50):
        b, n, l, d = (int(rng.integers(2, 7)), int(rng.integers(1, 8)), int(rng.integers(1, 10)), int(rng.integers(1, 17)))
        r = torch.from_numpy(rng.standard_normal((b, n + 1, d)))
        t = torch.from_numpy(rng.standard_normal((b, l + 1, d)))
        rl = rng.integers(1, n + 1, b)
        wl = rng.integers(1, l + 1, b)
        rm = torch.from_numpy(np.arange(n)[None, :] < rl[:, None])
        wm = torch.from_numpy(np.arange(l)[None, :] < wl[:, None])
        refine = bool(k % 2 == 0)
        fast = compute_bundle(r, t, rm, wm, use_refinement=refine)
        slow = brute_force_bundle(r, t, rl, wl, refine)
        for name in ("global_sim", "local_v2l", "local_l2v"):
            worst = max(worst, float((getattr(fast, name) - getattr(slow, name)).abs().max()))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-6 and elapsed < 60
    report("oracle equivalence", passed, f"max |fast - brute force| {worst:.2e} (<= 1e-6) on 50 instances, {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# refinement


def test_refinement_properties(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        l = int(rng.integers(2, 17))
        a = torch.from_numpy(rng.standard_normal(l) * rng.uniform(0.01, 3)).softmax(-1)
        out = refine_weights(a)
        bad += int(not bool(((out == 0) | (out > 1.0 / l)).all()))
    uniform_ok = all(bool((refine_weights(torch.full((l,), 1.0 / l, dtype=D)) == 0).all()) for l in range(2, 33))
    uniform_ok &= all(bool((refine_weights(torch.zeros(l, dtype=D).softmax(-1)) == 0).all()) for l in range(2, 33))
    single_ok = all(refine_weights(torch.tensor([w], dtype=D)).item() == w for w in (1.0, 0.3))
    elapsed = time.perf_counter() - start
    passed = bad == 0 and uniform_ok and single_ok and elapsed < 5
    report(
        "refinement properties",
        passed,
        f"{bad}/1000 rows violate 0-or->1/L, uniform rows zeroed={uniform_ok}, L=1 passthrough={single_ok}, {elapsed:.2f}s",
    )
    assert passed


# ---------------------------------------------------------------------------
# invariances


def _bundle_entries(bundle):
    return torch.stack([bundle.global_sim, bundle.local_v2l, bundle.local_l2v])


def test_invariance_suites(report):
    rng = np.random.default_rng(2)
    worst_perm = worst_scale = 0.0
    for trial in range(100):
        b, n, l, d = 3, int(rng.integers(2, 8)), int(rng.integers(2, 10)), int(rng.integers(2, 17))
        r = torch.from_numpy(rng.standard_normal((b, n + 1, d)))
        t = torch.from_numpy(rng.standard_normal((b, l + 1, d)))
        rm, wm = full_masks(b, n, l)
        refine = bool(trial % 2)
        base = _bundle_entries(compute_bundle(r, t, rm, wm, use_refinement=refine))

        pr = np.concatenate([[0], 1 + rng.permutation(n)])
        pt = np.concatenate([[0], 1 + rng.permutation(l)])
        moved = _bundle_entries(compute_bundle(r[:, pr], t[:, pt], rm, wm, use_refinement=refine))
        worst_perm = max(worst_perm, float((moved - base).abs().max()))

        r2, t2 = r.clone(), t.clone()
        c = float(np.exp(rng.uniform(-5, 5)))
        target = r2 if trial % 4 < 2 else t2
        target[int(rng.integers(b)), int(rng.integers(target.shape[1]))] *= c
        scaled = _bundle_entries(compute_bundle(r2, t2, rm, wm, use_refinement=refine))
        worst_scale = max(worst_scale, float((scaled - base).abs().max()))
    passed = worst_perm <= 1e-6 and worst_scale <= 1e-6
    report(
        "invariance suites",
        passed,
        f"permutation max change {worst_perm:.2e}, positive rescaling max change {worst_scale:.2e} (<= 1e-6, 100 trials each)",
    )
    assert passed


# ---------------------------------------------------------------------------
# initialization loss


def test_initialization_loss(report):
    b, n, l, d = 8, 8, 10, 32
    sums = dict.fromkeys(("global_v2l", "global_l2v", "local_v2l", "local_l2v"), 0.0)
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        r = torch.nn.functional.normalize(torch.randn(b, n + 1, d, generator=g, dtype=D), dim=-1)
        t = torch.nn.functional.normalize(torch.randn(b, l + 1, d, generator=g, dtype=D), dim=-1)
        _, terms = total_loss(compute_bundle(r, t, *full_masks(b, n, l)), 1.0)
        for name in sums:
            sums[name] += float(terms[name]) / 20
    target = math.log(8)
    passed = all(abs(v - target) <= 0.15 for v in sums.values())
    detail = ", ".join(f"{k}={v:.4f}" for k, v in sums.items())
    report("initialization loss", passed, f"{detail}; each within 0.15 of ln 8 = {target:.4f}")
    assert passed


# ---------------------------------------------------------------------------
# planted recovery and ablation

_RUNS: dict = {}


def planted_run(seed, **overrides):
    """Train on the seed's planted set; memoized so criteria can share runs."""
    key = (seed, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        planted = generate_planted_dataset(64, 32, 8, 10, 32, 0.1, seed=seed)
        config = planted_model_config(planted, **overrides)
        schedule = Schedule(PLANTED_FIT["base_lr"], (), 0.1, PLANTED_FIT["epochs"])
        start = time.perf_counter()
        result = fit(planted.train, config, schedule, seed=seed, batch_size=PLANTED_FIT["batch_size"])
        elapsed = time.perf_counter() - start
        _RUNS[key] = {
            "planted": planted,
            "model": result.model,
            "seconds": elapsed,
            "R1": evaluate_retrieval(result.model, planted.test, "t2v")["R1"],
            "alignment": planted_alignment_accuracy(result.model, planted.test, planted.truth),
        }
    return _RUNS[key]


def test_planted_recovery(report):
    run = planted_run(0)
    passed = run["R1"] >= 90 and run["alignment"] >= 80 and run["seconds"] < 300
    report(
        "planted recovery",
        passed,
        f"test R@1 {run['R1']:.2f} (>= 90), alignment {run['alignment']:.2f}% (>= 80), "
        f"200 epochs in {run['seconds']:.1f}s (< 300s)",
    )
    assert passed


def test_ablation_direction(report):
    seeds = range(5)
    full = [planted_run(s) for s in seeds]
    base = [planted_run(s, use_local_losses=False) for s in seeds]
    plain = [planted_run(s, use_refinement=False) for s in seeds]
    full_r1 = float(np.mean([r["R1"] for r in full]))
    base_r1 = float(np.mean([r["R1"] for r in base]))
    refined = float(np.mean([r["alignment"] for r in full]))
    unrefined = float(np.mean([r["alignment"] for r in plain]))
    rwa_ok = full_r1 > base_r1
    refine_ok = refined >= unrefined
    report(
        "ablation: full objective vs global-only",
        rwa_ok,
        f"mean test R@1 {full_r1:.2f} vs {base_r1:.2f} (strictly greater) over 5 seeds",
    )
    report(
        "ablation: refinement vs no refinement",
        refine_ok,
        f"mean alignment {refined:.2f}% vs {unrefined:.2f}% (>=) over 5 seeds; "
        f"per seed {[round(r['alignment'], 1) for r in full]} vs {[round(r['alignment'], 1) for r in plain]}",
    )
    assert rwa_ok and refine_ok


# ---------------------------------------------------------------------------
# schedule, token budget, serialization


def test_schedule_exactness(report):
    pre = [lr_at_epoch(PRETRAIN_SCHEDULE, e) for e in (0, 30, 40)]
    fine = [lr_at_epoch(FINETUNE_SCHEDULE, e) for e in (0, 2, 4, 8, 9)]
    passed = pre == [1e-5, 1e-6, 1e-7] and fine == [1e-5, 1e-6, 1e-7, 1e-8, 1e-8]
    report("schedule exactness", passed, f"pre-train epochs 0/30/40 -> {pre}; fine-tune epochs 0/2/4/8/9 -> {fine}")
    assert passed


def test_token_budget(report):
    rep = estimate_cost(frames=8, regions_per_frame=30, patches_per_frame=196)
    t_region, t_patch, ratio = rep["region"]["tokens"], rep["patch"]["tokens"], rep["attention_ratio"]
    passed = t_region == 241 and t_patch == 1569 and abs(ratio - 42.4) <= 0.1
    report("token budget", passed, f"{t_region} vs {t_patch} tokens, quadratic ratio {ratio:.3f} (42.4 +- 0.1)")
    assert passed


def test_serialization(report, tmp_path):
    run = planted_run(0)
    planted, model = run["planted"], run["model"]

    ds = planted.test
    write_dataset(tmp_path / "d1", ds.manifest, ds.regions)
    write_dataset(tmp_path / "d2", ds.manifest, ds.regions)
    files = sorted(p.name for p in (tmp_path / "d1").iterdir())
    data_bytes = all((tmp_path / "d1" / f).read_bytes() == (tmp_path / "d2" / f).read_bytes() for f in files)
    back = read_dataset(tmp_path / "d1")
    data_values = back.manifest == ds.manifest and all(
        np.array_equal(getattr(back.regions[v], a), getattr(ds.regions[v], a))
        for v in ds.regions
        for a in ("features", "locations", "confidences", "frame_index")
    )

    save_checkpoint(model, tmp_path / "c1")
    save_checkpoint(model, tmp_path / "c2")
    ckpt_bytes = all(
        (tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes()
        for f in ("config.json", "params.json", "params.bin")
    )
    loaded, _ = load_checkpoint(tmp_path / "c1")
    ckpt_values = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))

    before = {d: evaluate_retrieval(model, ds, d) for d in ("t2v", "v2t")}
    after = {d: evaluate_retrieval(loaded, back, d) for d in ("t2v", "v2t")}
    metrics_equal = before == after

    passed = data_bytes and data_values and ckpt_bytes and ckpt_values and metrics_equal
    report(
        "serialization",
        passed,
        f"dataset values={data_values} bytes={data_bytes}; checkpoint values={ckpt_values} bytes={ckpt_bytes}; "
        f"metrics after reload identical={metrics_equal}",
    )
    assert passed
