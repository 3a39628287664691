"""Declarative run configuration: typed keys, INI files with per-verb sections,
flat ``key = value`` manifests and command-line overrides."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .feature import TransformSpec
from .harness import ExperimentConfig
from .loss import LossWeights


class ConfigError(ValueError):
    """Bad key, value or file; reported as a usage error."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt(conv):
    return lambda text: None if text.strip() in ("", "none", "None") else conv(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


_EXPERIMENT = [
    Key("k_I", int, 8, "neighbors for iLID"),
    Key("k_P", int, 5, "neighbors for pLID"),
    Key("batch", int, 64, "batch / generated-set size"),
    Key("steps", int, 100, "optimization steps"),
    Key("lr", float, 0.5, "step size"),
    Key("lambda_I", float, 0.01, "iLID weight"),
    Key("lambda_P", float, 0.1, "pLID weight"),
    Key("lambda_A", float, 0.01, "adversarial weight"),
    Key("lambda_gp", float, 10.0, "gradient-penalty weight"),
    Key("transform", str, "identity", "feature transform, e.g. conv_stack:seed=0,depth=2,channels=8"),
]

COMMON = [
    Key("seed", int, 0, "master seed"),
    Key("threads", int, 1, "worker threads for distance computations"),
]

VERBS: dict[str, list[Key]] = {
    "lid-estimate": [
        Key("input", str, None, "point set (.dt, N x D)"),
        Key("k", int, 8, "neighbors per point"),
    ],
    "drift-demo": _EXPERIMENT + [
        Key("n_drifts", int, 20, "number of drift values"),
        Key("d_max", float, 3.0, "largest drift"),
        Key("trials", int, 20, "clusters averaged per drift value"),
    ],
    "dim-recovery": [
        Key("dims", _ints, (1, 2, 4, 8), "comma-separated dimensions"),
        Key("n", int, 10000, "samples per dimension"),
        Key("k", int, 100, "neighbors"),
        Key("n_queries", int, 100, "points whose estimates are averaged"),
    ],
    "inpaint": _EXPERIMENT + [
        Key("input", _opt(str), None, "image (.png or .dt); a seeded texture if unset"),
        Key("size", int, 32, "side of the generated texture"),
        Key("mask", str, "random", "'random' or top,left,height,width"),
        Key("init_noise", float, 0.05, "noise on the initial fill"),
        Key("backoff", _bool, True, "halve the step on a loss increase"),
    ],
    "train-toy": _EXPERIMENT + [
        Key("dataset", _opt(str), None, "image directory; seeded textures if unset"),
        Key("n_images", int, 64, "generated dataset size"),
        Key("size", int, 32, "generated image side"),
        Key("holdout", float, 0.125, "held-out fraction"),
        Key("eval_every", _opt(int), None, "held-out evaluation interval (default one epoch)"),
        Key("width", int, 8, "generator width"),
        Key("critic_hidden", int, 16, "critic hidden units"),
        Key("clip", _opt(float), 1.0, "global gradient-norm clip"),
        Key("checkpoint_every", _opt(int), None, "checkpoint interval (always at the end)"),
        Key("resume", _opt(str), None, "checkpoint directory to resume from"),
    ],
    "ablate": _EXPERIMENT + [
        Key("grid_I", _floats, (0.0, 0.01), "comma-separated lambda_I values"),
        Key("grid_P", _floats, (0.0, 0.1), "comma-separated lambda_P values"),
        Key("n_images", int, 8, "evaluation images"),
        Key("size", int, 32, "evaluation image side"),
    ],
    "metrics": [
        Key("a", str, None, "first image"),
        Key("b", str, None, "second image"),
    ],
}

# verb-specific defaults that differ from the shared experiment ones
_DEFAULTS = {
    "inpaint": {"steps": 100, "lr": 0.1, "lambda_I": 0.0},  # one image: no generated set for iLID
    "train-toy": {"steps": 200, "lr": 0.1, "batch": 16},
    "ablate": {"steps": 30, "lr": 0.05},
}

RESERVED = ("verb", "version")


def keys_for(verb: str) -> dict[str, Key]:
    if verb not in VERBS:
        raise ConfigError(f"unknown verb {verb!r}")
    return {k.name: k for k in COMMON + VERBS[verb]}


def defaults(verb: str) -> dict[str, Any]:
    d = {name: k.default for name, k in keys_for(verb).items()}
    d.update(_DEFAULTS.get(verb, {}))
    return d


def read_config_file(path: str | os.PathLike, verb: str) -> dict[str, str]:
    """Raw values for ``verb`` from an INI file or a flat key = value file.

    In an INI file the ``[common]`` section applies first (keys that do not
    concern ``verb`` are skipped), then the ``[verb]`` section. A flat file,
    such as a run manifest, must only contain keys valid for ``verb``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    known = keys_for(verb)
    first = next((ln.strip() for ln in text.splitlines()
                  if ln.strip() and not ln.lstrip().startswith(("#", ";"))), "")
    flat = not first.startswith("[")
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string("[__flat__]\n" + text if flat else text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".splitlines()[0]) from None
    out: dict[str, str] = {}
    if flat:
        sec = cp["__flat__"]
        if "verb" in sec and sec["verb"] != verb:
            raise ConfigError(f"{path} is a manifest for {sec['verb']!r}, not {verb!r}")
        for key, value in sec.items():
            if key in RESERVED:
                continue
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} for {verb}")
            out[key] = value
        return out
    if cp.has_section("common"):
        out.update({k: v for k, v in cp["common"].items() if k in known})
    if cp.has_section(verb):
        for key, value in cp[verb].items():
            if key not in known:
                raise ConfigError(f"{path} [{verb}]: unknown key {key!r}")
            out[key] = value
    return out


def parse_overrides(items) -> list[tuple[str, str]]:
    pairs = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve(verb: str, layers) -> dict[str, Any]:
    """Apply raw ``(key, text)`` layers over the defaults; later entries win."""
    known = keys_for(verb)
    values = defaults(verb)
    for key, text in layers:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {verb}")
        try:
            values[key] = known[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    return values


def experiment_config(values: dict[str, Any]) -> ExperimentConfig:
    try:
        weights = LossWeights(values["lambda_I"], values["lambda_P"], values["lambda_A"],
                              values["lambda_gp"])
        return ExperimentConfig(seed=values["seed"], transform=TransformSpec.parse(values["transform"]),
                                weights=weights, k_I=values["k_I"], k_P=values["k_P"],
                                batch=values["batch"], steps=values["steps"], lr=values["lr"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def manifest_lines(verb: str, values: dict[str, Any], version: str) -> list[str]:
    lines = [f"verb = {verb}", f"version = {version}"]
    lines += [f"{k.name} = {_fmt(values[k.name])}" for k in COMMON + VERBS[verb]]
    return lines


def write_manifest(path: str | os.PathLike, verb: str, values: dict[str, Any], version: str) -> None:
    Path(path).write_text("\n".join(manifest_lines(verb, values, version)) + "\n")
