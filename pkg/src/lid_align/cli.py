"""``lid-align`` command line: one binary, one subcommand per experiment."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import harness, knn
from .config import ConfigError

log = logging.getLogger("lid_align")

SYNOPSES = {
    "lid-estimate": "per-point MLE LID of a point set (.dt, N x D); prints the mean",
    "drift-demo": "iLID of a reference point as a generated cluster drifts away",
    "dim-recovery": "LID estimates on uniform unit-ball samples of several dimensions",
    "inpaint": "direct inpainting of one image with the LID regularizers",
    "train-toy": "train the toy generator and critic on synthetic textures or a directory",
    "ablate": "lambda_I x lambda_P grid of direct-inpainting runs",
    "metrics": "PSNR and SSIM between two images",
}

PATH_KEYS = ("input", "dataset", "resume", "a", "b")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lid-align", description="LID-based submanifold alignment toolkit.",
                epilog="Any key can also be given as a trailing key=value override; "
                       "overrides win over the config file and flags, later ones over earlier.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    for verb, synopsis in SYNOPSES.items():
        sp = sub.add_parser(verb, help=synopsis, description=synopsis)
        sp.add_argument("--config", help="INI file ([common] and [%s] sections) or a run manifest" % verb)
        sp.add_argument("--out", help=f"output directory (default runs/{verb})")
        for key in cfgmod.COMMON + cfgmod.VERBS[verb]:
            default = cfgmod.defaults(verb)[key.name]
            sp.add_argument("--" + key.name.replace("_", "-"), dest=key.name, metavar="V",
                            help=f"{key.help} (default {cfgmod._fmt(default)})")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _configure_logging():
    level = os.environ.get("LID_ALIGN_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"LID_ALIGN_LOG: unknown level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _resolve(verb: str, ns: argparse.Namespace) -> dict:
    layers = []
    if ns.config:
        layers += list(cfgmod.read_config_file(ns.config, verb).items())
    for key in cfgmod.COMMON + cfgmod.VERBS[verb]:
        v = getattr(ns, key.name)
        if v is not None:
            layers.append((key.name, v))
    layers += cfgmod.parse_overrides(ns.overrides)
    values = cfgmod.resolve(verb, layers)
    for key in PATH_KEYS:
        if values.get(key):
            values[key] = str(Path(values[key]).resolve())
    return values


def _require(values, *keys):
    missing = [k for k in keys if not values.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


# -- verbs ------------------------------------------------------------------------


def _lid_estimate(values, out: Path):
    from .lid import lid_rows
    from .tensor import load_tensor

    _require(values, "input")
    pts = load_tensor(values["input"]).astype(np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"{values['input']}: expected an N x D point set, got shape {pts.shape}")
    k = values["k"]
    if len(pts) <= k:
        raise ValueError(f"need more than k={k} points, got {len(pts)}")
    idx = np.arange(len(pts))
    dist, _ = knn.neighbors_batch(pts, pts, k, exclude=idx)
    est = lid_rows(dist)
    harness.write_csv(out / "lid.csv", ["index", "lid"], zip(idx.tolist(), est.tolist()))
    mean = float(np.mean(est))
    print(f"mean_lid={mean!r}")


def _drift_demo(values, out: Path):
    from .plotting import plot_drift

    cfg = cfgmod.experiment_config(values)
    pts = harness.run_drift_demo(cfg, n_drifts=values["n_drifts"], d_max=values["d_max"],
                                 trials=values["trials"])
    harness.write_csv(out / "curve.csv", ["drift", "mean_ilid", "stderr"],
                      [(p.drift, p.mean_ilid, p.stderr) for p in pts])
    plot_drift(pts, out / "curve.png")
    print(f"ilid(d={pts[0].drift:g})={pts[0].mean_ilid:.4f} ilid(d={pts[-1].drift:g})={pts[-1].mean_ilid:.4f}")


def _dim_recovery(values, out: Path):
    from .plotting import plot_dimension

    cfg = harness.ExperimentConfig(seed=values["seed"])
    rows = harness.run_dimension_recovery(cfg, dims=values["dims"], n=values["n"], k=values["k"],
                                          n_queries=values["n_queries"])
    harness.write_csv(out / "dimension.csv", ["dim", "mean_lid", "stderr"],
                      [(r.dim, r.mean, r.stderr) for r in rows])
    plot_dimension(rows, out / "dimension.png")
    for r in rows:
        print(f"dim={r.dim} mean_lid={r.mean:.4f}")


def _parse_mask(spec: str, extent, seed: int):
    from .feature import Mask, random_mask

    if spec.strip() == "random":
        return random_mask(seed, extent)
    try:
        bbox = tuple(int(v) for v in spec.split(","))
    except ValueError:
        bbox = ()
    if len(bbox) != 4:
        raise ConfigError(f"mask must be 'random' or top,left,height,width, got {spec!r}")
    return Mask.from_bbox(extent, bbox)


def _inpaint(values, out: Path):
    from .images import load_image, save_image
    from .metrics import compare
    from .plotting import plot_trajectory
    from .textures import texture_batch

    cfg = cfgmod.experiment_config(values)
    if values["input"]:
        image = load_image(values["input"]).astype(np.float64)
    else:
        image = texture_batch(1, values["size"], 3, seed=cfg.seed)[0].astype(np.float64)
    mask = _parse_mask(values["mask"], image.shape[:2], cfg.seed)
    res = harness.run_inpaint_direct(cfg, image, mask, init_noise=values["init_noise"],
                                     backoff=values["backoff"])
    save_image(image * mask.tensor[..., None], out / "masked.png")
    save_image(res.restored, out / "restored.png")
    rows = [{"step": i, "lr": (res.lrs[i - 1] if i else 0.0), **vars(r)} for i, r in enumerate(res.reports)]
    cols = ["step", "total", "rec", "adv", "ilid", "plid", "lr"]
    harness.write_csv(out / "trajectory.csv", cols, [[r[c] for c in cols] for r in rows])
    plot_trajectory(rows, ["total", "rec", "ilid", "plid"], out / "trajectory.png")
    m = compare(res.restored, image)
    first, last = res.reports[0], res.reports[-1]
    print(f"total {first.total:.4f} -> {last.total:.4f}  psnr={m.psnr:.3f} ssim={m.ssim:.4f}")


def _train_toy(values, out: Path):
    from .plotting import plot_trajectory
    from .textures import texture_batch

    cfg = cfgmod.experiment_config(values)
    if values["dataset"]:
        data = values["dataset"]
    else:
        data = texture_batch(values["n_images"], values["size"], 3, seed=cfg.seed)
    res = harness.run_train_toy(cfg, data, out_dir=out, holdout=values["holdout"],
                                eval_every=values["eval_every"], width=values["width"],
                                critic_hidden=values["critic_hidden"],
                                checkpoint_every=values["checkpoint_every"], clip=values["clip"],
                                resume=values["resume"])
    cols = ["step", "total", "rec", "adv", "ilid", "plid", "critic", "penalty"]
    harness.write_csv(out / "train_log.csv", cols, [[r[c] for c in cols] for r in res.log])
    ecols = ["step", "rec", "psnr", "ssim"]
    harness.write_csv(out / "eval_log.csv", ecols, [[r[c] for c in ecols] for r in res.eval_log])
    if res.log:
        plot_trajectory(res.log, ["total", "rec", "ilid", "plid", "critic"], out / "train_log.png")
    if len(res.eval_log) > 1:
        plot_trajectory(res.eval_log, ["rec", "psnr", "ssim"], out / "eval_log.png")
    if res.eval_log:
        e0, e1 = res.eval_log[0], res.eval_log[-1]
        print(f"held-out rec {e0['rec']:.4f} (step {e0['step']}) -> {e1['rec']:.4f} (step {e1['step']}), "
              f"psnr={e1['psnr']:.3f} ssim={e1['ssim']:.4f}")


def _ablate(values, out: Path):
    from .plotting import plot_ablation

    cfg = cfgmod.experiment_config(values)
    images, masks = harness.evaluation_set(cfg, n=values["n_images"], size=values["size"])
    rows = harness.run_ablation(cfg, values["grid_I"], values["grid_P"], images, masks)
    harness.write_csv(out / "ablation.csv", ["lambda_I", "lambda_P", "psnr", "ssim"],
                      [(r.lambda_I, r.lambda_P, r.psnr, r.ssim) for r in rows])
    plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"lambda_I={r.lambda_I:g} lambda_P={r.lambda_P:g} psnr={r.psnr:.3f} ssim={r.ssim:.4f}")


def _metrics(values, out: Path):
    from .images import load_image
    from .metrics import compare

    _require(values, "a", "b")
    m = compare(load_image(values["a"]), load_image(values["b"]))
    harness.write_csv(out / "metrics.csv", ["psnr", "ssim"], [(m.psnr, m.ssim)])

    def fmt(v):
        return "inf" if math.isinf(v) else repr(v)

    print(f"psnr={fmt(m.psnr)} ssim={fmt(m.ssim)}")


DISPATCH = {
    "lid-estimate": _lid_estimate,
    "drift-demo": _drift_demo,
    "dim-recovery": _dim_recovery,
    "inpaint": _inpaint,
    "train-toy": _train_toy,
    "ablate": _ablate,
    "metrics": _metrics,
}


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    verb = ns.verb
    try:
        _configure_logging()
        values = _resolve(verb, ns)
        knn.set_threads(values["threads"])
    except (ConfigError, ValueError) as exc:
        print(f"lid-align {verb}: usage error: {exc}", file=sys.stderr)
        return 2
    out = Path(ns.out or Path("runs") / verb)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.write_manifest(out / "manifest.txt", verb, values, __version__)
        log.info("running %s into %s", verb, out)
        DISPATCH[verb](values, out)
    except ConfigError as exc:
        print(f"lid-align {verb}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic for any runtime failure
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"lid-align {verb}: error: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(parse_and_dispatch(argv))


if __name__ == "__main__":
    main()
