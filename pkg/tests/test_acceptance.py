"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 to 7 train desk-profile models on the toy dataset; every distinct
configuration is trained once per session and shared between criteria.
Expect roughly twenty minutes on one CPU core.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import ACCEPTANCE_LINES
from gradcheck import fd_max_rel_error
from pointdif import evaluation as ev
from pointdif.config import TrainConfig
from pointdif.diffusion import (
    interval_bounds, linear_schedule, posterior_mean_eps, posterior_stats, predicted_mean, q_sample,
    recurrent_uniform_sample,
)
from pointdif.networks import (
    CANet, ModelDims, PatchEmbed, PCNet, PointDenoiser, PointDif, PosEmbed, TimeEmbed,
    TransformerEncoder, param_groups,
)
from pointdif.patching import fps, knn_indices, num_masked
from pointdif.pointcloud_io import make_toy_dataset
from pointdif.training import (
    diffusion_loss, fit, load_checkpoint, make_schedule, new_state, pretrain_step, sample_timesteps,
    save_checkpoint,
)

DESK = TrainConfig()
SEEDS = (0, 1, 2)


def report(request, capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print(f"\n{line}")
    request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
    assert ok, line


@pytest.fixture(scope="session")
def toy():
    return make_toy_dataset(50, 256, seed=0)


@pytest.fixture(scope="session")
def zoo(toy):
    """Memoized desk training runs, keyed by config."""
    states, seconds = {}, {}

    def get(config):
        if config not in states:
            start = time.perf_counter()
            states[config] = fit(toy, config)
            seconds[config] = time.perf_counter() - start
        return states[config]

    get.seconds = seconds
    return get


@pytest.fixture(scope="session")
def scores(toy, zoo):
    """Evaluation cache shared by the ablation harnesses (config -> probe scores)."""
    cache = {}

    def fill(config):
        key = (config, 0)
        if key not in cache:
            cache[key] = ev.evaluate_model(zoo(config).model, toy, config)
        return cache

    fill.cache = cache
    return fill


# --------------------------------------------------------------------------- 1

def test_criterion_1_diffusion_math(request, capsys):
    start = time.perf_counter()
    s = linear_schedule(2000, 1e-4, 1e-2)
    m, v, chain_err = 1.0, 0.0, 0.0
    for t in range(1, s.T + 1):
        m = np.sqrt(1 - s.beta[t]) * m
        v = (1 - s.beta[t]) * v + s.beta[t]
        chain_err = max(chain_err, abs(m - np.sqrt(s.alpha_bar[t])), abs(v - (1 - s.alpha_bar[t])))

    rng = np.random.default_rng(0)
    dual_err = 0.0
    for _ in range(1000):
        t = int(rng.integers(2, s.T + 1))
        x0, eps = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        xt = q_sample(x0, t, eps, s)
        mu_x0, _ = posterior_stats(xt, x0, t, s)
        for mu in (posterior_mean_eps(xt, eps, t, s), predicted_mean(xt, eps, t, s)):
            dual_err = max(dual_err, float(np.abs(mu_x0 - mu).max() / np.abs(mu).max()))
    elapsed = time.perf_counter() - start
    ok = chain_err <= 1e-12 and dual_err < 1e-10 and elapsed < 10
    report(request, capsys, 1, ok,
           f"chain error {chain_err:.2e} (<=1e-12), dual-form rel error {dual_err:.2e} (<1e-10), "
           f"{elapsed:.1f}s (<10s)")


# --------------------------------------------------------------------------- 2

TOY = ModelDims(D=8, heads=2, blocks=2, cond_dim=6, time_dim=4, pcnet_dims=(3, 5, 6, 7, 6, 5),
                embed_hidden=(5, 6), pos_hidden=5, canet_hidden=6)


def _randn(*shape, seed=0, grad=False):
    x = torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return x.requires_grad_(grad)


def _gradient_cases():
    torch.manual_seed(0)
    cases = {}
    m = PatchEmbed(8, (5, 6)).double()
    p = _randn(2, 3, 6, 3, grad=True)
    cases["patch embed"] = (lambda: m(p), list(m.parameters()) + [p], 40)
    pe = PosEmbed(8, 5).double()
    c = _randn(4, 3, seed=1, grad=True)
    cases["positional embed"] = (lambda: pe(c), list(pe.parameters()) + [c], 40)
    enc = TransformerEncoder(8, 2, 2).double()
    tok, pos = _randn(2, 4, 8, seed=2, grad=True), _randn(2, 4, 8, seed=3, grad=True)
    cases["transformer encoder"] = (lambda: enc(tok, pos), list(enc.parameters()) + [tok, pos], 12)
    net = CANet(8, 6, 5).double()
    tk = _randn(2, 5, 8, seed=4, grad=True)
    cases["condition aggregation"] = (lambda: net(tk), list(net.parameters()) + [tk], 40)
    te = TimeEmbed(6).double()
    cases["time embed"] = (lambda: te(torch.tensor([1, 50, 199])), list(te.parameters()), 40)
    layer = PCNet(4, 5, 3).double()
    h, y = _randn(2, 6, 4, seed=5, grad=True), _randn(2, 3, seed=6, grad=True)
    cases["gated point layer"] = (lambda: layer(h, y), list(layer.parameters()) + [h, y], 40)
    for mode in ("pcnet", "concat", "cross_attention"):
        den = PointDenoiser(TOY.pcnet_dims, 10, mode, out_scale=1.0).double()
        x, yy = _randn(2, 7, 3, seed=7, grad=True), _randn(2, 10, seed=8, grad=True)
        cases[f"denoiser/{mode}"] = ((lambda d=den, x=x, yy=yy: d(x, yy)), list(den.parameters()) + [x, yy], 10)

    model = PointDif(TOY).double()
    with torch.no_grad():
        for q in model.denoiser.layers[-1].parameters():
            q.mul_(100)
    centers, patches = _randn(1, 5, 3, seed=9), _randn(1, 5, 4, 3, seed=10)
    vis, msk = np.array([[0, 3]]), np.array([[1, 2, 4]])
    x0, t = _randn(1, 6, 3, seed=11), torch.tensor([17])

    def full():
        return model.denoise(x0, model.condition(centers, patches, vis, msk), t)

    cases["full model"] = (full, list(model.parameters()), 4)
    return cases


def test_criterion_2_gradients(request, capsys):
    start = time.perf_counter()
    errors = {name: fd_max_rel_error(fn, params, max_entries=n)
              for name, (fn, params, n) in _gradient_cases().items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and elapsed < 120
    report(request, capsys, 2, ok,
           f"{len(errors)} operations, worst {worst} {errors[worst]:.2e} (<1e-4), {elapsed:.0f}s (<120s)")


# --------------------------------------------------------------------------- 3

def _fps_oracle(pts, s):
    chosen = [0]
    while len(chosen) < s:
        d = [min(sum((a - b) ** 2 for a, b in zip(p, pts[j])) for j in chosen) for p in pts]
        chosen.append(max(range(len(pts)), key=lambda i: (d[i], -i)))
    return chosen


def _knn_oracle(pts, center, k):
    return [i for _, i in sorted((sum((a - b) ** 2 for a, b in zip(p, center)), i)
                                 for i, p in enumerate(pts))[:k]]


def _chamfer_oracle(a, b):
    def way(p, q):
        return sum(min(sum((x - y) ** 2 for x, y in zip(u, w)) for w in q) for u in p) / len(p)
    return way(a, b) + way(b, a)


def test_criterion_3_oracles(request, capsys):
    rng = np.random.default_rng(0)
    fps_bad = knn_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        pts = rng.standard_normal((n, 3))
        if rng.random() < 0.25:  # duplicated points exercise the tie-breaks
            pts[rng.integers(n, size=n // 2)] = pts[0]
        s, k = int(rng.integers(1, n + 1)), int(rng.integers(1, n + 1))
        lst = pts.tolist()
        centers = fps(pts, s, 0)
        fps_bad += centers.tolist() != _fps_oracle(lst, s)
        got = knn_indices(pts, pts[centers], k)
        knn_bad += any(got[j].tolist() != _knn_oracle(lst, lst[c], k) for j, c in enumerate(centers))

    cham_err = 0.0
    for _ in range(50):
        a, b = rng.standard_normal((rng.integers(1, 40), 3)), rng.standard_normal((rng.integers(1, 40), 3))
        cham_err = max(cham_err, abs(ev.chamfer(a, b) - _chamfer_oracle(a.tolist(), b.tolist())))

    grid = [(s, m) for s in (1, 8, 16, 32, 64, 100) for m in (0, 0.1, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9)]
    mask_bad = sum(num_masked(s, m) != int(np.floor(s * m + 1e-9)) for s, m in grid)
    r64 = num_masked(64, 0.8)
    ok = fps_bad == 0 and knn_bad == 0 and cham_err <= 1e-12 and mask_bad == 0 and r64 == 51
    report(request, capsys, 3, ok,
           f"FPS mismatches {fps_bad}/200, KNN mismatches {knn_bad}/200, chamfer error {cham_err:.1e}, "
           f"mask-count mismatches {mask_bad}/{len(grid)}, (64, 0.8) -> {r64}")


# --------------------------------------------------------------------------- 4

def test_criterion_4_sampler(request, capsys):
    rng = np.random.default_rng(0)
    bounds = interval_bounds(2000, 4)
    draws = np.stack([recurrent_uniform_sample(2000, 4, rng) for _ in range(100_000)])
    placement = all(((draws[:, i] >= lo) & (draws[:, i] <= hi)).all() for i, (lo, hi) in enumerate(bounds))
    pvals = [stats.chisquare(np.bincount(draws[:, i] - lo, minlength=hi - lo + 1)).pvalue
             for i, (lo, hi) in enumerate(bounds)]
    ok = bounds == [(1, 500), (501, 1000), (1001, 1500), (1501, 2000)] and placement and min(pvals) > 0.01
    report(request, capsys, 4, ok,
           f"one draw per interval {placement}, chi-square p-values {', '.join(f'{p:.3f}' for p in pvals)} (>0.01)")


# --------------------------------------------------------------------------- 5

def test_criterion_5_training(request, capsys, toy, zoo, tmp_path):
    state = zoo(DESK)
    seconds = zoo.seconds[DESK]
    first, last = state.losses[0], state.losses[-1]
    decay = last <= 0.5 * first

    sch = make_schedule(DESK)
    x, _ = toy.split("train")
    x0 = torch.as_tensor(x[:8], dtype=torch.float32)
    ts = sample_timesteps(DESK, np.random.default_rng(0), 8)
    eps = torch.randn(8, DESK.h, *x0.shape[1:])
    c = torch.zeros(8, DESK.dims.cond_dim)
    oracle = diffusion_loss(state.model, x0, c, ts, eps, sch, denoise=lambda xt, c, t: eps.reshape(xt.shape))

    fresh = new_state(DESK)
    loss = pretrain_step(fresh.model, x[:8], DESK, sch, np.random.default_rng(0))
    loss.backward()
    groups = param_groups(fresh.model)
    reached = [name for name, ps in groups.items() if any(p.grad is not None and p.grad.abs().sum() > 0 for p in ps)]

    short = replace(DESK, epochs=4)
    straight = fit(toy, short)
    save_checkpoint(fit(toy, short, epochs=2), tmp_path / "half.pdck")
    resumed = fit(toy, short, state=load_checkpoint(tmp_path / "half.pdck"))
    bitwise = resumed.losses == straight.losses and all(
        torch.equal(a, b) for a, b in zip(straight.model.state_dict().values(), resumed.model.state_dict().values()))

    ok = decay and oracle.item() == 0.0 and len(reached) == len(groups) and bitwise and seconds <= 900
    report(request, capsys, 5, ok,
           f"loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f} <= 0.5), oracle loss {oracle.item()}, "
           f"gradient groups {len(reached)}/{len(groups)}, resume bitwise {bitwise}, fit {seconds:.0f}s (<=900s)")


# --------------------------------------------------------------------------- 6

def test_criterion_6_representation(request, capsys, toy, zoo):
    rows = []
    for seed in SEEDS:
        cfg = replace(DESK, seed=seed)
        pre = ev.linear_probe(zoo(cfg).model, toy, cfg).accuracy
        rand = ev.linear_probe(ev.random_init_model(cfg), toy, cfg).accuracy
        rows.append((pre, rand))
    pre, rand = np.array(rows).T
    margin = float(np.mean(pre - rand))
    ok = pre.min() >= 0.90 and margin >= 0.05
    report(request, capsys, 6, ok,
           f"pre-trained {np.round(pre, 3).tolist()} (>=0.90), random init {np.round(rand, 3).tolist()}, "
           f"paired margin {margin:+.3f} (>=+0.05)")


# --------------------------------------------------------------------------- 7

def test_criterion_7a_conditional_generation(request, capsys, toy, zoo):
    model = zoo(DESK).model
    labels = np.asarray(toy.labels)
    val = toy.val_idx
    cond, uncond = [], []
    for j, i in enumerate(val):
        other = next(v for v in val[j:] + val[:j] if labels[v] != labels[i])
        cond.append(ev.reconstruct(model, toy.clouds[i], DESK, DESK.mask_ratio, seed=j).chamfer)
        uncond.append(ev.reconstruct(model, toy.clouds[i], DESK, DESK.mask_ratio, seed=j,
                                     condition_from=toy.clouds[other]).chamfer)
    cond, uncond = np.array(cond), np.array(uncond)
    wins = int((cond < uncond).sum())
    ok = len(val) >= 30 and cond.mean() < uncond.mean()
    report(request, capsys, "7a", ok,
           f"{len(val)} shapes, chamfer conditional {cond.mean():.4f} vs unrelated condition "
           f"{uncond.mean():.4f}, paired wins {wins}/{len(val)}")


def test_criterion_7b_interval_trend(request, capsys, toy, scores):
    cache = scores(DESK)
    rep = ev.interval_ablation(toy, ev.quarter_intervals(DESK.T, DESK.h), DESK, cache=cache)
    early, late = rep.rows[0], rep.rows[DESK.h - 1]
    ok = early.probe_accuracy > late.probe_accuracy
    table = ", ".join(f"{r.setting} {r.probe_accuracy:.3f}/{r.fewshot_accuracy:.3f}" for r in rep.rows)
    report(request, capsys, "7b", ok,
           f"early {early.setting} {early.probe_accuracy:.3f} > late {late.setting} {late.probe_accuracy:.3f}; "
           f"probe/1-shot: {table}")


def test_criterion_7c_mask_trend(request, capsys, toy, scores):
    cache = scores(DESK)
    rep = ev.mask_ratio_sweep(toy, [0.0, 0.4, 0.8], DESK, cache=cache)
    base = rep.rows[0].probe_accuracy
    best = max(r.probe_accuracy for r in rep.rows[1:])
    ok = best > base
    table = ", ".join(f"{r.setting} {r.probe_accuracy:.3f}/{r.fewshot_accuracy:.3f}" for r in rep.rows)
    report(request, capsys, "7c", ok, f"best nonzero {best:.3f} > m=0 {base:.3f}; probe/1-shot: {table}")


def test_criterion_7d_guidance_order(request, capsys, toy, scores):
    cache = scores(DESK)
    rep = ev.guidance_ablation(toy, ["pcnet", "concat", "cross_attention"], DESK, cache=cache)
    acc = [r.probe_accuracy for r in rep.rows]
    ok = acc[0] >= acc[1] >= acc[2]
    table = ", ".join(f"{r.setting} {r.probe_accuracy:.3f}/{r.fewshot_accuracy:.3f}" for r in rep.rows)
    report(request, capsys, "7d", ok, f"pcnet >= concat >= cross_attention; probe/1-shot: {table}")


def test_reconstruction_more_evidence_not_worse(request, capsys, toy, zoo):
    """Supplementary example: conditioning on every patch is no worse on average than m=0.8."""
    model = zoo(DESK).model
    full, masked = [], []
    for j, i in enumerate(toy.val_idx):
        full.append(ev.reconstruct(model, toy.clouds[i], DESK, 0.0, seed=j).chamfer)
        masked.append(ev.reconstruct(model, toy.clouds[i], DESK, 0.8, seed=j).chamfer)
    ok = np.mean(full) <= np.mean(masked)
    report(request, capsys, "example (reconstruction)", ok,
           f"chamfer m=0 {np.mean(full):.4f} <= m=0.8 {np.mean(masked):.4f} over {len(full)} shapes")
