"""Command-line entry point: ``icon-peft {train,evaluate,count-params,grad-check,rollout}``.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import KINDS, AdapterRecipe, apply_freeze_policy, attach, build_model, registry_for
from .backbone import ViT, attention_maps, attention_rollout, received_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRECISIONS, RunConfig, load_run_config
from .data import _normalize, load_dataset, source_split
from .errors import ConfigError, DataError, DimensionError, IconPeftError, NumericalError, ValidationError
from .nn import Module
from .tensor import cross_entropy
from .trainer import evaluate, pretrain_backbone, train

log = logging.getLogger("icon_peft")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

GRAD_CHECK_LIMITS = {"embed_dim": 32, "depth": 2}
GRAD_CHECK_THRESHOLDS = {"f32": 1e-3, "f64": 1e-5}


def _threads() -> contextlib.AbstractContextManager:
    try:
        n = int(os.environ.get("ICON_PEFT_THREADS", "1"))
    except ValueError:
        raise ConfigError("ICON_PEFT_THREADS must be an integer") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(n, 1))


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.precision = args.precision
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    return cfg


def build_run_model(cfg: RunConfig, init: bool = True) -> ViT:
    return ViT(cfg.model, seed=cfg.train.seed, dtype=cfg.dtype, init=init)


def prepare_model(cfg: RunConfig, data=None) -> tuple[ViT, "ParameterRegistry", list]:
    """Backbone (optionally loaded or pretrained), then adapters and freeze policy."""
    model = build_run_model(cfg)
    history: list = []
    if cfg.init_checkpoint:
        load_checkpoint(cfg.init_checkpoint, model, strict=False)
    if cfg.train.pretrain_epochs:
        source = source_split(cfg.data, cfg.train.pretrain_samples, cfg.model.image_size, cfg.model.in_channels)
        history = pretrain_backbone(model, source, cfg.train)
    attach(model, cfg.recipe, seed=cfg.train.seed)
    registry = apply_freeze_policy(model, cfg.recipe)
    return model, registry, history


def format_metrics(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "split", "loss", "accuracy"])
    for row in history:
        writer.writerow([row["epoch"], row["split"], repr(float(row["loss"])), repr(float(row["accuracy"]))])
    return buf.getvalue()


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.data, cfg.model.image_size, cfg.model.in_channels)
    model, registry, _ = prepare_model(cfg, data)
    write_json(out / "params.json", registry.report())
    history = train(model, registry, data, cfg.train, kind=cfg.recipe.kind)
    (out / "metrics.csv").write_text(format_metrics(history), encoding="utf-8")
    save_checkpoint(out / "model", model, registry, cfg.to_dict())
    print(f"wrote {out / 'metrics.csv'}, {out / 'model.json'}, {out / 'params.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    data = load_dataset(cfg.data, cfg.model.image_size, cfg.model.in_channels)
    model = build_model(cfg.model, cfg.recipe, seed=cfg.train.seed, dtype=cfg.dtype)
    load_checkpoint(args.checkpoint, model)
    split = data.test if data.test is not None else data.train
    acc, loss = evaluate(model, split, cfg.train.eval_batch_size)
    print(json.dumps({"accuracy": acc, "loss": loss}))
    return EXIT_OK


def recipe_variants(recipe: AdapterRecipe) -> list[tuple[str, AdapterRecipe]]:
    base = recipe.to_dict()
    rows = []
    for kind in KINDS:
        fields = {**base, "kind": kind}
        if kind != "icon":
            fields.update(placement="sequential", kernel_size=3)
        rows.append((kind, AdapterRecipe(**fields)))
    for k in (1, 3, 5, 7):
        rows.append((f"icon K={k}", AdapterRecipe(**{**base, "kind": "icon", "kernel_size": k})))
    return rows


def cmd_count_params(args) -> int:
    cfg = _load(args)
    registry = registry_for(cfg.model, cfg.recipe)
    report = registry.report()
    print(f"model: D={cfg.model.embed_dim} N={cfg.model.depth} P={cfg.model.patch_size} "
          f"image={cfg.model.image_size} classes={cfg.model.num_classes}")
    print(f"recipe {cfg.recipe.kind}: total {report['total']:,}  trainable {report['trainable']:,}  "
          f"({report['ratio']:.2f}%)")
    print()
    print(f"{'recipe':<24}{'trainable':>14}{'params (M)':>12}{'ratio':>9}")
    for label, recipe in recipe_variants(cfg.recipe):
        reg = registry_for(cfg.model, recipe)
        n = reg.count("trainable")
        print(f"{label:<24}{n:>14,}{n / 1e6:>12.2f}{reg.ratio():>8.2f}%")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "params.json", report)
    return EXIT_OK


def _randomize(params: dict, rng: np.random.Generator, scale: float) -> None:
    for p in params.values():
        p.data[...] = rng.uniform(-scale, scale, size=p.shape).astype(p.dtype) + (
            1.0 if p.kind in ("norm", "scale") and p.data.mean() > 0.5 else 0.0
        )


def _group(name: str) -> str:
    return re.sub(r"\.\d+\.", ".*.", name)


def run_grad_check(cfg: RunConfig, precision: str, max_coords: int = 6, h: float = 1e-5, seed: int = 0) -> dict:
    """Max relative gradient error per parameter group, with the numeric side always in 64-bit."""
    for key, limit in GRAD_CHECK_LIMITS.items():
        if getattr(cfg.model, key) > limit:
            raise ConfigError(f"grad-check needs model.{key} <= {limit}, got {getattr(cfg.model, key)}")
    rng = np.random.default_rng(seed)
    dtype = PRECISIONS[precision]
    model = build_model(cfg.model, cfg.recipe, seed=seed, dtype=dtype)
    registry = apply_freeze_policy(model, cfg.recipe)
    params = registry.trainable()
    # move away from zero-initialised up-projections so every group carries signal
    _randomize(params, rng, 0.3)
    m = cfg.model
    images = rng.standard_normal((2, m.in_channels, m.image_size, m.image_size))
    labels = rng.integers(0, m.num_classes, size=2)

    def loss_of(mod: Module):
        return lambda: cross_entropy(mod.forward(images), labels)

    with T.Tape() as tape:
        loss = loss_of(model)()
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    reference = build_model(cfg.model, cfg.recipe, seed=seed, dtype="float64")
    apply_freeze_policy(reference, cfg.recipe)
    ref_params = dict(reference.named_parameters())
    for name, p in model.named_parameters():
        ref_params[name].data[...] = p.data
    ref_trainable = {name: ref_params[name] for name in params}
    errors = T.gradient_errors(loss_of(reference), ref_trainable, h=h, max_coords=max_coords, seed=seed,
                               analytic=analytic)
    groups: dict[str, float] = {}
    for name, err in errors.items():
        key = _group(name)
        groups[key] = max(groups.get(key, 0.0), err)
    return groups


def cmd_grad_check(args) -> int:
    cfg = _load(args)
    precision = args.precision or cfg.precision
    threshold = GRAD_CHECK_THRESHOLDS[precision]
    groups = run_grad_check(cfg, precision)
    worst = max(groups.values(), default=0.0)
    print(f"grad-check recipe={cfg.recipe.kind} placement={cfg.recipe.placement} precision={precision} "
          f"threshold={threshold:g}")
    for key, err in groups.items():
        status = "ok" if err <= threshold else "FAIL"
        print(f"  {key:<44} {err:.3e}  {status}")
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst <= threshold else EXIT_NUMERICAL


def read_image(path, channels: int, size: int) -> np.ndarray:
    """``[C, H, W]`` float image from ``.npy`` or binary PGM (P5) / PPM (P6)."""
    path = Path(path)
    if path.suffix == ".npy":
        image = np.load(path).astype(np.float32)
    else:
        raw = path.read_bytes()
        tokens = re.match(rb"(P[56])\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
        if tokens is None:
            raise DataError(f"{path}: not a binary PGM/PPM file")
        magic, w, h, maxval = tokens.group(1), *map(int, tokens.groups()[1:])
        depth = 3 if magic == b"P6" else 1
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        pixels = np.frombuffer(raw, dtype=dtype, offset=tokens.end(), count=w * h * depth)
        image = pixels.reshape(h, w, depth).transpose(2, 0, 1).astype(np.float32) / maxval
    if image.ndim == 2:
        image = image[None]
    if image.shape != (channels, size, size):
        raise DimensionError(f"{path}: image shape {image.shape} does not match model ({channels}, {size}, {size})")
    return image


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit binary PGM of ``values`` after min-max normalisation."""
    pixels = np.round(minmax(values) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def cmd_rollout(args) -> int:
    cfg = _load(args)
    model = build_model(cfg.model, cfg.recipe, seed=cfg.train.seed, dtype=cfg.dtype)
    load_checkpoint(args.checkpoint, model)
    image = read_image(args.image, cfg.model.in_channels, cfg.model.image_size)
    image = _normalize(image[None], cfg.data.mean, cfg.data.std)
    records = [r[0] for r in attention_maps(image, model)]
    rollout = attention_rollout(records)
    grid = received_attention(rollout, cfg.model.grid)
    normalized = minmax(grid)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    with open(out / f"{stem}_rollout.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in normalized:
            writer.writerow([f"{v:.6f}" for v in row])
    write_pgm(out / f"{stem}_rollout.pgm", grid)
    print(f"wrote {out / (stem + '_rollout.csv')} and {out / (stem + '_rollout.pgm')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icon-peft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="run-config JSON file")
        p.add_argument("--seed", type=int, help="override train.seed and data.seed")
        p.add_argument("--precision", choices=sorted(PRECISIONS), help="override precision")
        if out:
            p.add_argument("--out", help="override output_dir")
        return p

    common(sub.add_parser("train", help="train a recipe and write metrics, checkpoint and params.json"))
    p = common(sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint"), out=False)
    p.add_argument("--checkpoint", required=True)
    common(sub.add_parser("count-params", help="trainable-parameter table for every recipe"))
    common(sub.add_parser("grad-check", help="finite-difference check of every trainable group"), out=False)
    p = common(sub.add_parser("rollout", help="export the attention-rollout map of one image"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".npy, .pgm or .ppm image")
    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "count-params": cmd_count_params,
    "grad-check": cmd_grad_check,
    "rollout": cmd_rollout,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads():
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, DimensionError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
