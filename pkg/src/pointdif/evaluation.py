"""Desk-scale evaluation: Chamfer distance, conditional reconstruction,
frozen-encoder linear probing and the pre-training ablation harnesses.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .diffusion import interval_bounds, sample_loop
from .networks import PointDif
from .patching import fps, knn_group, mask_patches
from .pointcloud_io import check_cloud
from .training import build_model, fit, make_schedule

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance from a to b plus the same from b to a."""
    a = check_cloud(a)
    b = check_cloud(b)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# --------------------------------------------------------------------------- features

def _group(points, config: TrainConfig):
    pts = np.asarray(points, dtype=np.float64)
    ci = fps(pts, config.num_patches, 0)
    return pts[ci], knn_group(pts, pts[ci], config.patch_size)


@torch.no_grad()
def encode_features(model: PointDif, clouds, config: TrainConfig, batch: int = 64) -> np.ndarray:
    """Frozen representation: concat(max-pool, mean-pool) of latents over all patches."""
    model.eval()
    feats = []
    s = config.num_patches
    for i in range(0, len(clouds), batch):
        grouped = [_group(p, config) for p in clouds[i:i + batch]]
        centers = torch.as_tensor(np.stack([g[0] for g in grouped]), dtype=torch.float32)
        patches = torch.as_tensor(np.stack([g[1] for g in grouped]), dtype=torch.float32)
        vis = np.tile(np.arange(s), (len(grouped), 1))
        lat, _ = model.encode(centers, patches, vis)
        feats.append(torch.cat([lat.max(dim=1).values, lat.mean(dim=1)], dim=-1).double().numpy())
    return np.concatenate(feats)


def model_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- probing

@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict
    confusion: np.ndarray  # rows: true label, cols: predicted


def fit_linear_classifier(x, y, n_classes: int, steps: int = 500, lr: float = 0.5,
                          l2: float = 1e-3):
    """Multinomial logistic regression by full-batch gradient descent on standardized features."""
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.long)
    mu, sd = x.mean(0), x.std(0, unbiased=False).clamp_min(1e-8)
    xs = (x - mu) / sd
    W = torch.zeros(x.shape[1], n_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([W, b], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(xs @ W + b, y) + l2 * (W ** 2).sum()
        loss.backward()
        opt.step()
    W, b = W.detach(), b.detach()
    return lambda z: ((torch.as_tensor(z, dtype=torch.float64) - mu) / sd @ W + b).argmax(1).numpy()


def probe_features(train_x, train_y, val_x, val_y, n_classes: int = 3) -> ProbeResult:
    if len(np.unique(train_y)) < 2:
        raise EvaluationError("linear probe needs at least two classes in the train split")
    predict = fit_linear_classifier(train_x, train_y, n_classes)
    pred = predict(val_x)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(val_y), pred), 1)
    per_class = {c: float(conf[c, c] / conf[c].sum()) for c in range(n_classes) if conf[c].sum()}
    return ProbeResult(float(np.trace(conf) / conf.sum()), per_class, conf)


def linear_probe(model: PointDif, dataset, config: TrainConfig, labels=None) -> ProbeResult:
    """Train a linear classifier on frozen encoder features; report validation accuracy.

    ``labels`` optionally replaces the dataset labels (e.g. shuffled, for a chance-level control).
    """
    labels = np.asarray(dataset.labels if labels is None else labels)
    tr, va = np.asarray(dataset.train_idx), np.asarray(dataset.val_idx)
    clouds = np.stack(dataset.clouds)
    feats = encode_features(model, clouds, config)
    return probe_features(feats[tr], labels[tr], feats[va], labels[va],
                          n_classes=int(labels.max()) + 1)


def few_shot_accuracy(features, labels, train_idx, val_idx, shots: int = 1, repeats: int = 20,
                      seed: int = 0) -> float:
    """Mean validation accuracy of probes trained on ``shots`` random examples per class."""
    labels = np.asarray(labels)
    tr, va = np.asarray(train_idx), np.asarray(val_idx)
    classes = np.unique(labels[tr])
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(repeats):
        sel = np.concatenate([rng.choice(tr[labels[tr] == c], shots, replace=False) for c in classes])
        accs.append(probe_features(features[sel], labels[sel], features[va], labels[va],
                                   n_classes=int(labels.max()) + 1).accuracy)
    return float(np.mean(accs))


# --------------------------------------------------------------------------- generation

@dataclass
class Reconstruction:
    masked: np.ndarray      # points of the visible patches
    generated: np.ndarray
    chamfer: float


@torch.no_grad()
def condition_for(model: PointDif, points, config: TrainConfig, mask_ratio: float, seed):
    """Condition vector of one cloud after masking; also returns the visible points."""
    model.eval()
    pts = np.asarray(points, dtype=np.float64)
    centers, patches = _group(pts, config)
    vis, msk = mask_patches(config.num_patches, mask_ratio, seed)
    c = model.condition(torch.as_tensor(centers[None], dtype=torch.float32),
                        torch.as_tensor(patches[None], dtype=torch.float32), vis[None], msk[None])
    visible = (patches[vis] + centers[vis][:, None, :]).reshape(-1, 3)
    return c[0], np.unique(visible, axis=0)


def model_denoiser(model: PointDif):
    @torch.no_grad()
    def denoise(x, c, t):
        xt = torch.as_tensor(x, dtype=torch.float32)
        lead = xt.shape[:-2]
        cc = c.reshape(-1, c.shape[-1]).expand(int(np.prod(lead)) if lead else 1, -1)
        tt = torch.full((cc.shape[0],), t)
        out = model.denoise(xt.reshape(-1, *xt.shape[-2:]), cc, tt)
        return out.reshape(xt.shape).double().numpy()
    return denoise


def generate(model: PointDif, c, n_points: int, config: TrainConfig, seed) -> np.ndarray:
    return sample_loop(model_denoiser(model), c, n_points, make_schedule(config),
                       np.random.default_rng(seed))


def reconstruct(model: PointDif, points, config: TrainConfig, mask_ratio: float, seed,
                out_dir=None, condition_from=None) -> Reconstruction:
    """Mask ``points``, condition on the visible patches and generate a full cloud.

    ``condition_from`` substitutes another cloud as the conditioning source, which
    gives the unconditional (unrelated-condition) baseline.
    """
    if not isinstance(model, PointDif):
        raise EvaluationError("reconstruct needs a trained PointDif model")
    pts = check_cloud(points)
    src = pts if condition_from is None else check_cloud(condition_from)
    c, visible = condition_for(model, src, config, mask_ratio, seed)
    gen = generate(model, c, len(pts), config, seed)
    rec = Reconstruction(visible, gen, chamfer(gen, pts))
    if out_dir is not None:
        from .pointcloud_io import save_xyz
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_xyz(pts, out / "input.xyz")
        save_xyz(visible, out / "masked.xyz")
        save_xyz(gen, out / "generated.xyz")
    return rec


# --------------------------------------------------------------------------- ablations

REPORT_HEADER = ["setting", "lo", "hi", "h", "mask_ratio", "guidance", "seed", "probe_accuracy",
                 "fewshot_accuracy", "recon_chamfer"]


@dataclass
class AblationRow:
    setting: str
    lo: int
    hi: int
    h: int
    mask_ratio: float
    guidance: str
    seed: int
    probe_accuracy: float
    fewshot_accuracy: float
    recon_chamfer: float


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.setting, r.lo, r.hi, r.h, repr(r.mask_ratio), r.guidance, r.seed,
                            repr(r.probe_accuracy), repr(r.fewshot_accuracy), repr(r.recon_chamfer)])

    @classmethod
    def from_csv(cls, path) -> "AblationReport":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != REPORT_HEADER:
                raise EvaluationError(f"unexpected report header {header}")
            rows = [AblationRow(s, int(lo), int(hi), int(h), float(m), g, int(sd), float(a), float(f),
                                float(c))
                    for s, lo, hi, h, m, g, sd, a, f, c in reader]
        return cls(rows)

    def by_setting(self) -> dict:
        return {r.setting: r for r in self.rows}


def _recon_score(model, dataset, config, n_shapes: int, seed: int) -> float:
    if n_shapes <= 0:
        return float("nan")
    val = dataset.val_idx[:n_shapes]
    return float(np.mean([reconstruct(model, dataset.clouds[i], config, config.mask_ratio, seed + j).chamfer
                          for j, i in enumerate(val)]))


def evaluate_model(model: PointDif, dataset, config: TrainConfig, recon_shapes: int = 0) -> tuple:
    """(probe accuracy, 1-shot probe accuracy, mean reconstruction Chamfer) of one model."""
    feats = encode_features(model, np.stack(dataset.clouds), config)
    labels = np.asarray(dataset.labels)
    tr, va = np.asarray(dataset.train_idx), np.asarray(dataset.val_idx)
    acc = probe_features(feats[tr], labels[tr], feats[va], labels[va],
                         n_classes=int(labels.max()) + 1).accuracy
    few = few_shot_accuracy(feats, labels, tr, va, shots=1, seed=config.seed)
    return acc, few, _recon_score(model, dataset, config, recon_shapes, config.seed)


def run_setting(dataset, config: TrainConfig, setting: str, recon_shapes: int = 0,
                cache: dict | None = None) -> AblationRow:
    """Pre-train one model under ``config`` and evaluate it.

    ``cache`` maps configs to earlier results so that a setting shared between
    harnesses (e.g. the default model) is trained only once.
    """
    key = (config, recon_shapes)
    if cache is not None and key in cache:
        scores = cache[key]
    else:
        state = fit(dataset, config)
        scores = evaluate_model(state.model, dataset, config, recon_shapes)
        if cache is not None:
            cache[key] = scores
    lo, hi = config.interval or (1, config.T)
    row = AblationRow(setting, lo, hi, config.h, config.mask_ratio, config.dims.guidance,
                      config.seed, *scores)
    log.info("%s: probe %.3f few-shot %.3f", setting, row.probe_accuracy, row.fewshot_accuracy)
    return row


def interval_ablation(dataset, intervals, config: TrainConfig, recon_shapes: int = 0,
                      cache: dict | None = None) -> AblationReport:
    """One pre-training per restricted interval, plus the full-range recurrent-sampling model."""
    rows = []
    for lo, hi in intervals:
        if lo > hi:
            raise EvaluationError(f"empty interval [{lo}, {hi}]")
        if not 1 <= lo <= hi <= config.T:
            raise EvaluationError(f"interval [{lo}, {hi}] not inside [1, {config.T}]")
        cfg = replace(config, interval_lo=lo, interval_hi=hi)
        rows.append(run_setting(dataset, cfg, f"[{lo},{hi}]", recon_shapes, cache))
    full = replace(config, interval_lo=None, interval_hi=None)
    rows.append(run_setting(dataset, full, f"[1,{config.T}]", recon_shapes, cache))
    return AblationReport(rows)


def quarter_intervals(T: int, h: int = 4) -> list:
    return interval_bounds(T, h)


def mask_ratio_sweep(dataset, ratios, config: TrainConfig, recon_shapes: int = 0,
                     cache: dict | None = None) -> AblationReport:
    rows = []
    for m in ratios:
        if not 0.0 <= m <= 0.95:
            raise EvaluationError(f"mask ratio {m} outside [0, 0.95]")
        if config.num_patches - int(config.num_patches * m + 1e-9) < 1:
            raise EvaluationError(f"mask ratio {m} leaves no visible patch")
        rows.append(run_setting(dataset, replace(config, mask_ratio=m), f"m={m:g}", recon_shapes, cache))
    return AblationReport(rows)


def guidance_ablation(dataset, modes, config: TrainConfig, recon_shapes: int = 0,
                      cache: dict | None = None) -> AblationReport:
    rows = []
    for mode in modes:
        cfg = replace(config, dims=replace(config.dims, guidance=mode))
        rows.append(run_setting(dataset, cfg, mode, recon_shapes, cache))
    return AblationReport(rows)


def random_init_model(config: TrainConfig) -> PointDif:
    return build_model(config).eval()
