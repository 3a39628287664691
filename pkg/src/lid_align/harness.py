"""Desk-scale experiments: dimension recovery, drift, direct inpainting,
toy adversarial training and the lambda ablation grid.

Every experiment derives all randomness from ``ExperimentConfig.seed`` so
identical configs produce identical numbers.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import lid as lidmod
from .feature import (Mask, Transform, TransformSpec, composite, extract_patches, FeatureMap,
                      patches_at, patches_vjp, random_mask, region_patch_coords)
from .knn import neighbors_batch
from .loss import (LossReport, LossWeights, adv_critic_loss, adv_generator_loss, rec_loss, rec_loss_grad,
                   total_loss)
from .metrics import psnr, ssim
from .net import (MLPCritic, build_generator, clip_by_global_norm, generator_input, load_checkpoint,
                  save_checkpoint, sgd_step)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    transform: TransformSpec = field(default_factory=TransformSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    k_I: int = 8
    k_P: int = 5
    batch: int = 64
    steps: int = 100
    lr: float = 0.5

    def __post_init__(self):
        for name in ("k_I", "k_P", "batch", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class DriftMonotonicityError(RuntimeError):
    pass


def write_csv(path: str | os.PathLike, header, rows) -> None:
    """Comma-separated, header row, floats written with ``repr`` so reruns compare bit-exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- dimension recovery ---------------------------------------------------

def sample_unit_ball(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random((n, 1)) ** (1.0 / dim)


@dataclass(frozen=True)
class DimensionRow:
    dim: int
    mean: float
    stderr: float


def run_dimension_recovery(cfg: ExperimentConfig, dims=(1, 2, 4, 8), n: int = 10000,
                           k: int = 100, n_queries: int = 100) -> list[DimensionRow]:
    """Mean MLE estimate at ``n_queries`` sample points of uniform unit-ball data."""
    rows = []
    for dim in dims:
        rng = np.random.default_rng([cfg.seed, dim])
        X = sample_unit_ball(rng, n, dim)
        q = np.arange(n_queries)
        dist, _ = neighbors_batch(X[q], X, k, exclude=q)
        est = lidmod.lid_rows(dist)
        rows.append(DimensionRow(dim, float(np.mean(est)),
                                 float(np.std(est, ddof=1) / math.sqrt(len(est)))))
    return rows


# -- drift demo -------------------------------------------------------------

@dataclass(frozen=True)
class DriftPoint:
    drift: float
    mean_ilid: float
    stderr: float


def run_drift_demo(cfg: ExperimentConfig, n_drifts: int = 20, d_max: float = 3.0,
                   trials: int = 20, cluster_size: int | None = None) -> list[DriftPoint]:
    """iLID of a reference point as a 2-D generated cluster drifts off it.

    The cluster is an isotropic unit Gaussian in a plane through the reference
    y = 0 inside 3-D space; drifting moves it by d along the plane's normal.
    The curve must be strictly increasing, otherwise this raises.
    """
    m = cluster_size or cfg.batch
    rng = np.random.default_rng(cfg.seed)
    clusters = np.zeros((trials, m, 3))
    clusters[:, :, :2] = rng.standard_normal((trials, m, 2))
    y = np.zeros(3)
    points = []
    for d in np.linspace(0.0, d_max, n_drifts):
        vals = np.array([lidmod.ilid(y, Z + np.array([0.0, 0.0, d]), cfg.k_I).value
                         for Z in clusters])
        points.append(DriftPoint(float(d), float(vals.mean()),
                                 float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0))
    curve = np.array([p.mean_ilid for p in points])
    if np.any(np.diff(curve) <= 0):
        bad = int(np.argmax(np.diff(curve) <= 0))
        raise DriftMonotonicityError(
            f"iLID curve not strictly increasing between d={points[bad].drift:.4g} and d={points[bad + 1].drift:.4g}")
    return points


# -- shared objective ---------------------------------------------------------

class InpaintObjective:
    """Inpainting objective (without the adversarial term) over a batch of restorations.

    ``evaluate`` returns the loss parts and the gradient with respect to the
    composite images. A term whose weight is zero is not evaluated and
    reported as 0.
    """

    def __init__(self, originals, masks, transform: TransformSpec, weights: LossWeights,
                 k_I: int, k_P: int):
        self.y = np.asarray(originals, dtype=np.float64)
        self.masks = list(masks)
        if len(self.masks) != len(self.y):
            raise ValueError(f"{len(self.y)} images but {len(self.masks)} masks")
        self.w = weights
        self.k_I, self.k_P = k_I, k_P
        self.phi = Transform(transform)
        self.spec = transform
        self.fy = self.phi.apply(self.y)
        B = len(self.y)
        if weights.lambda_I > 0 and B < k_I:
            raise ValueError(f"iLID needs at least k_I={k_I} images in the batch, got {B}")
        H0 = self.y.shape[1]
        self.downscale = H0 // self.fy.shape[1]
        self.P = [extract_patches(FeatureMap(f, self.y.shape[1:3], str(transform))).vectors
                  for f in self.fy] if weights.lambda_P > 0 else None
        self.q_coords = [region_patch_coords(m, self.fy.shape[1:], self.downscale)
                         for m in self.masks] if weights.lambda_P > 0 else None
        if self.q_coords is not None:
            for i, c in enumerate(self.q_coords):
                if len(c) < k_P:
                    raise ValueError(f"image {i}: restored region yields {len(c)} patches, fewer than k_P={k_P}")

    def evaluate(self, x_hat, need_grad: bool = True):
        x_hat = np.asarray(x_hat, dtype=np.float64)
        rec, grad = rec_loss_grad(x_hat, self.y, batched=True)
        parts = {"rec": rec, "ilid": 0.0, "plid": 0.0, "adv": 0.0}
        if self.w.lambda_I > 0 or self.w.lambda_P > 0:
            fz = self.phi.apply(x_hat)
            gfeat = np.zeros_like(fz)
            if self.w.lambda_I > 0:
                B = len(fz)
                val, gz = lidmod.ilid_loss_grad(self.fy.reshape(B, -1), fz.reshape(B, -1), self.k_I)
                parts["ilid"] = val
                gfeat += self.w.lambda_I * gz.reshape(fz.shape)
            if self.w.lambda_P > 0:
                Q = [patches_at(f, c) for f, c in zip(fz, self.q_coords)]
                val, gq = lidmod.plid_loss_grad(self.P, Q, self.k_P)
                parts["plid"] = val
                for i, (g, c) in enumerate(zip(gq, self.q_coords)):
                    gfeat[i] += self.w.lambda_P * patches_vjp(g, c, fz.shape[1:])
            if need_grad:
                grad = grad + self.phi.vjp(gfeat)
        return parts, grad


def mean_plid_against_original(original, restored, mask: Mask, transform: TransformSpec, k_P: int) -> float:
    """Mean pLID of every original feature patch against the restored-region patches."""
    phi = Transform(transform)
    fy = phi.apply(np.asarray(original, dtype=np.float64)[None])[0]
    fz = phi.apply(np.asarray(restored, dtype=np.float64)[None])[0]
    ds = np.asarray(original).shape[0] // fy.shape[0]
    P = extract_patches(FeatureMap(fy, np.asarray(original).shape[:2], str(transform)))
    Q = patches_at(fz, region_patch_coords(mask, fz.shape, ds))
    return lidmod.plid_loss([P], [Q], k_P)


# -- direct inpainting -------------------------------------------------------

@dataclass
class InpaintResult:
    restored: np.ndarray
    reports: list[LossReport]
    lrs: list[float]


def _batchify(images, masks):
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
        masks = [masks]
    if isinstance(masks, Mask):
        masks = [masks] * len(arr)
    return arr, list(masks), single


def initial_fill(images, masks, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Known pixels kept; missing pixels set to the known per-channel mean plus Gaussian noise."""
    out = np.array(images, dtype=np.float64, copy=True)
    for i, m in enumerate(masks):
        known = m.tensor > 0
        fill = out[i][known].mean(axis=0) if known.any() else np.full(out.shape[-1], 0.5)
        miss = m.missing
        out[i][miss] = fill + rng.normal(0.0, noise, size=(int(miss.sum()), out.shape[-1]))
    return out


def run_inpaint_direct(cfg: ExperimentConfig, image, mask, steps: int | None = None,
                       lr: float | None = None, backoff: bool = True,
                       init_noise: float = 0.05, max_halvings: int = 20) -> InpaintResult:
    """Gradient descent on the regularized objective with missing pixels as free variables.

    ``image`` is one H x W x C image or a batch; ``mask`` a Mask or a list of
    them. The adversarial weight is ignored (no critic). With ``backoff`` a
    step that would raise the total loss is retried at half the step size;
    the halved size is kept for the remaining steps.
    """
    y, masks, single = _batchify(image, mask)
    if y.shape[1] < 16 or y.shape[2] < 16:
        raise ValueError(f"direct inpainting needs images of at least 16x16, got {y.shape[1]}x{y.shape[2]}")
    w = replace(cfg.weights, lambda_A=0.0)
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    t = np.stack([m.tensor for m in masks]).astype(np.float64)[..., None]
    free = np.broadcast_to(1.0 - t, y.shape)
    if not np.any(free):
        reports = [total_loss({"rec": 0.0}, w)]
        return InpaintResult(y[0] if single else y, reports, [])
    obj = InpaintObjective(y, masks, cfg.transform, w, cfg.k_I, cfg.k_P)
    rng = np.random.default_rng([cfg.seed, 7])
    x = initial_fill(y, masks, rng, init_noise)
    parts, grad = obj.evaluate(x)
    report = total_loss(parts, w)
    reports, lrs = [report], []
    for _ in range(steps):
        step = lr * grad * free
        trial = x - step
        tparts, tgrad = obj.evaluate(trial)
        treport = total_loss(tparts, w)
        halvings = 0
        while backoff and treport.total > report.total and halvings < max_halvings:
            lr *= 0.5
            halvings += 1
            trial = x - lr * grad * free
            tparts, tgrad = obj.evaluate(trial)
            treport = total_loss(tparts, w)
        if backoff and treport.total > report.total:
            lrs.append(0.0)
            reports.append(report)
            continue
        x, grad, report = trial, tgrad, treport
        lrs.append(lr)
        reports.append(report)
    return InpaintResult(x[0] if single else x, reports, lrs)


# -- toy adversarial training -----------------------------------------------

@dataclass
class TrainResult:
    log: list[dict]
    eval_log: list[dict]
    generator: dict
    critic: dict


def load_dataset(source) -> np.ndarray:
    from .images import list_images, load_image

    if isinstance(source, (str, os.PathLike)):
        paths = list_images(source)
        if not paths:
            raise ValueError(f"dataset {source} contains no .png or .dt images")
        imgs = [load_image(p) for p in paths]
        shapes = {im.shape for im in imgs}
        if len(shapes) != 1:
            raise ValueError(f"dataset images differ in shape: {sorted(shapes)}")
        return np.stack(imgs).astype(np.float64)
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim != 4 or len(arr) == 0:
        raise ValueError("dataset must be a non-empty N x H x W x C array")
    return arr


def _masks_for(key, count, extent):
    """``count`` random masks whose seeds derive from the entropy list ``key``."""
    return [random_mask(int(s), extent)
            for s in np.random.default_rng(key).integers(0, 2**31 - 1, size=count)]


def run_train_toy(cfg: ExperimentConfig, dataset, out_dir: str | os.PathLike | None = None,
                  holdout: float = 0.125, eval_every: int | None = None, width: int = 8,
                  critic_hidden: int = 16, checkpoint_every: int | None = None,
                  clip: float | None = 1.0, resume: str | os.PathLike | None = None) -> TrainResult:
    """Train the toy generator and critic on the full objective.

    Each step updates the critic once (WGAN-GP with the penalty at the mask
    composites) and then the generator on
    lambda_I * iLID + lambda_P * pLID + lambda_A * adv + rec.
    Held-out PSNR/SSIM are logged every ``eval_every`` steps (default: one
    epoch) and at the end.
    """
    data = load_dataset(dataset)
    n = len(data)
    n_eval = max(1, int(round(n * holdout))) if n > 1 else 0
    train, held = data[: n - n_eval], data[n - n_eval:]
    if len(train) == 0:
        raise ValueError("dataset too small to hold out an evaluation split")
    H, W, C = train.shape[1:]
    extent = (H, W)
    B = min(cfg.batch, len(train))
    w = cfg.weights
    if w.lambda_I > 0 and B < cfg.k_I:
        raise ValueError(f"iLID needs batches of at least k_I={cfg.k_I}, got {B}")
    eval_every = eval_every or max(1, len(train) // B)

    G = build_generator((H, W, C), width=width, seed=cfg.seed, dtype=np.float32)
    D = MLPCritic((H, W, C), hidden=critic_hidden, seed=cfg.seed + 1, dtype=np.float32)
    start = 0
    if resume is not None:
        G.params, meta = load_checkpoint(Path(resume) / "generator")
        D.params, _ = load_checkpoint(Path(resume) / "critic")
        start = int(meta["step"]) + 1
    eval_masks = _masks_for([cfg.seed, 12], len(held), extent)

    out = Path(out_dir) if out_dir is not None else None
    log_rows, eval_rows = [], []
    if len(held) and start == 0:
        eval_rows.append({"step": 0, **_evaluate(G, held, eval_masks)})
    for step in range(start, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = np.sort(rng.choice(len(train), size=B, replace=False))
        y = train[idx]
        masks = _masks_for([cfg.seed, 11, step], B, extent)
        t = np.stack([m.tensor for m in masks]).astype(np.float64)[..., None]
        x = y * t
        g_in = generator_input(x, t)
        gx = G.forward({"x": g_in})["image"]
        x_hat = composite(x, gx, t[..., 0])

        # critic
        d_loss, diag = adv_critic_loss(D, y, gx, x_hat, w.lambda_gp)
        dgrads = D.param_grads(gx, np.full(B, 1.0 / B))
        dreal = D.param_grads(y, np.full(B, -1.0 / B))
        _, pgrads = D.penalty(x_hat)
        dgrads = {k: dgrads[k] + dreal[k] + w.lambda_gp * pgrads[k] for k in dgrads}

        # generator
        obj = InpaintObjective(y, masks, cfg.transform, w, cfg.k_I, cfg.k_P)
        parts, g_xhat = obj.evaluate(x_hat)
        parts["adv"] = adv_generator_loss(D, gx)
        g_gx = (1.0 - t) * g_xhat
        if w.lambda_A > 0:
            g_gx = g_gx - w.lambda_A / B * D.input_grad(gx)
        report = total_loss(parts, w)
        ggrads = G.backward(g_gx).params
        if clip:
            ggrads, _ = clip_by_global_norm(ggrads, clip)
            dgrads, _ = clip_by_global_norm(dgrads, clip)

        G.params = sgd_step(G.params, ggrads, cfg.lr)
        D.params = sgd_step(D.params, dgrads, cfg.lr)
        row = {"step": step, "total": report.total, "rec": report.rec, "adv": report.adv,
               "ilid": report.ilid, "plid": report.plid, "critic": d_loss,
               "penalty": diag.penalty}
        log_rows.append(row)
        log.debug("step %d %s", step, row)

        last = step == cfg.steps - 1
        if len(held) and ((step + 1) % eval_every == 0 or last):
            eval_rows.append({"step": step + 1, **_evaluate(G, held, eval_masks)})
        if out is not None and (last or (checkpoint_every and (step + 1) % checkpoint_every == 0)):
            ck = out / "checkpoints" / f"step_{step:06d}"
            save_checkpoint(ck / "generator", G.params, {"step": step, "seed": cfg.seed})
            save_checkpoint(ck / "critic", D.params, {"step": step, "seed": cfg.seed})
    return TrainResult(log_rows, eval_rows, G.params, D.params)


def _evaluate(G, images, masks) -> dict:
    t = np.stack([m.tensor for m in masks]).astype(np.float64)[..., None]
    x = images * t
    gx = G.forward({"x": generator_input(x, t)})["image"]
    x_hat = composite(x, gx, t[..., 0])
    p = [psnr(a, b) for a, b in zip(x_hat, images)]
    s = [ssim(a, b) for a, b in zip(x_hat, images)]
    return {"rec": rec_loss(x_hat, images, batched=True),
            "psnr": float(np.mean(p)), "ssim": float(np.mean(s))}


# -- ablation -------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    lambda_I: float
    lambda_P: float
    psnr: float
    ssim: float


def evaluation_set(cfg: ExperimentConfig, n: int = 8, size: int = 32, channels: int = 3):
    from .textures import texture_batch

    images = texture_batch(n, size, channels, seed=cfg.seed)
    masks = _masks_for([cfg.seed, 13], n, (size, size))
    return images, masks


def run_ablation(cfg: ExperimentConfig, grid_I=(0.0, 0.01), grid_P=(0.0, 0.1),
                 images=None, masks=None, steps: int | None = None) -> list[AblationRow]:
    """One direct-inpainting run per (lambda_I, lambda_P) cell on a fixed evaluation set."""
    if images is None:
        images, masks = evaluation_set(cfg, n=max(cfg.k_I, 8))
    rows = []
    for lam_i in grid_I:
        for lam_p in grid_P:
            c = replace(cfg, weights=replace(cfg.weights, lambda_I=float(lam_i), lambda_P=float(lam_p)))
            res = run_inpaint_direct(c, images, masks, steps=steps)
            p = [psnr(a, b) for a, b in zip(res.restored, images)]
            s = [ssim(a, b) for a, b in zip(res.restored, images)]
            rows.append(AblationRow(float(lam_i), float(lam_p), float(np.mean(p)), float(np.mean(s))))
    return rows
