"""Command-line pipeline driver.

Subcommands cover the full path from synthetic data to a yield number:

    gen-synthetic  draw a corpus of textured scenes with known centers
    gen-gt         render density and localization maps for a corpus
    augment        expand a corpus into training patches on disk
    train          fit the counting network on a patch directory
    infer          run a weights file over images, write count records
    eval           score prediction records against point annotations
    yield          convert a heads-per-foot figure to bushels per acre

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The HEADCOUNT_SEED environment variable supplies a default --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
from PIL import Image

from .augment import iter_patches, read_patches, save_map, write_patches
from .corpus import CorpusManifest, generate_synthetic, save_corpus, \
    split_corpus
from .evaluation import DEFAULT_KERNELS_PER_HEAD, YieldInput, evaluate, \
    yield_estimate
from .grad import AutodiffError
from .groundtruth import density_map, localization_map
from .infer import predict
from .model import ModelConfig, save_weights
from .train import NumericError, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flag combination detected after argparse accepted the line."""


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    raw = os.environ.get("HEADCOUNT_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"HEADCOUNT_SEED={raw!r} is not an integer")


def load_config(path) -> dict:
    """Read a config file: flat key=value lines, or one JSON object."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config JSON must be an object")
        return doc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def build_configs(overrides: dict):
    """Split flat config keys into (ModelConfig, TrainConfig).

    A key present in both dataclasses (seed) lands in both. Unknown
    keys are an error rather than a silent ignore.
    """
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    mkw, tkw = {}, {}
    for key, value in overrides.items():
        hit = False
        if key in model_fields:
            mkw[key] = tuple(value) if isinstance(value, list) else value
            hit = True
        if key in train_fields:
            tkw[key] = value
            hit = True
        if not hit:
            raise ValueError(f"unknown config key {key!r}")
    return ModelConfig(**mkw), TrainConfig(**tkw)


def _load_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def cmd_gen_synthetic(args) -> int:
    seed = resolve_seed(args.seed)
    scenes = generate_synthetic(
        args.n, args.heads_min, args.heads_max, args.size,
        np.random.default_rng(seed),
    )
    manifest_path = save_corpus(scenes, args.out)
    if args.test_fraction is not None:
        full = CorpusManifest.load(manifest_path)
        train_m, test_m = split_corpus(full, args.test_fraction, seed)
        train_m.save(os.path.join(args.out, "manifest_train.json"))
        test_m.save(os.path.join(args.out, "manifest_test.json"))
    print(manifest_path)
    return EXIT_OK


def cmd_gen_gt(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    index = []
    for entry in manifest.entries:
        ann = manifest.annotation_set(entry)
        den = density_map(ann)
        loc = localization_map(ann)
        den_name = ann.image_id + ".den.whgt"
        loc_name = ann.image_id + ".loc.whgt"
        save_map(os.path.join(args.out, den_name), den.values)
        save_map(os.path.join(args.out, loc_name), loc.values)
        index.append(
            {
                "image_id": ann.image_id,
                "density": den_name,
                "loc": loc_name,
                "count": len(ann),
            }
        )
    index_path = os.path.join(args.out, "index.json")
    with open(index_path, "w") as fh:
        json.dump(index, fh, indent=1)
    print(index_path)
    return EXIT_OK


def cmd_augment(args) -> int:
    seed = resolve_seed(args.seed)
    manifest = CorpusManifest.load(args.manifest)
    stream = iter_patches(manifest.iter_images(), seed)
    index_path = write_patches(stream, args.out)
    print(index_path)
    return EXIT_OK


def cmd_train(args) -> int:
    patches = read_patches(args.patches)
    overrides = dict(load_config(args.config)) if args.config else {}
    if args.seed is not None or "seed" not in overrides:
        overrides["seed"] = resolve_seed(args.seed)
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    model_cfg, train_cfg = build_configs(overrides)
    ckpt = train(
        patches, model_cfg, train_cfg,
        log_path=args.log,
        checkpoint_path=args.checkpoint,
        checkpoint_every=args.checkpoint_every,
        resume_from=args.resume,
    )
    save_weights(args.out, ckpt.params, ckpt.model_cfg)
    print(args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.emit_maps:
        os.makedirs(args.emit_maps, exist_ok=True)
    records = []
    for path in args.image:
        image_id = os.path.splitext(os.path.basename(path))[0]
        pred = predict(
            _load_image(path), args.weights,
            threshold=args.threshold, image_id=image_id,
            keep_maps=bool(args.emit_maps),
        )
        if args.emit_maps:
            save_map(
                os.path.join(args.emit_maps, image_id + ".den.whgt"),
                pred.density_map,
            )
            save_map(
                os.path.join(args.emit_maps, image_id + ".loc.whgt"),
                pred.loc_map,
            )
        records.append(pred.as_record())
    payload = json.dumps(records, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
        print(args.out)
    else:
        print(payload)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt, count_source=args.count_source)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report.as_dict(), fh, indent=1)
    print(report.text_table())
    return EXIT_OK


def cmd_yield(args) -> int:
    if args.heads_per_foot is not None:
        heads_per_foot = args.heads_per_foot
    else:
        if args.feet_per_image is None:
            raise UsageError(
                "--from-prediction requires --feet-per-image"
            )
        with open(args.from_prediction) as fh:
            records = json.load(fh)
        if not records:
            raise ValueError(f"{args.from_prediction}: no records")
        mean_count = sum(r["avg_count"] for r in records) / len(records)
        heads_per_foot = mean_count / args.feet_per_image
    est = yield_estimate(
        YieldInput(heads_per_foot, args.kernels, args.spacing_in)
    )
    print(f"{est:.4f} bu/acre")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headcount",
        description="Wheat head counting and yield estimation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic",
                       help="generate a synthetic annotated corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--heads-min", type=int, default=1)
    p.add_argument("--heads-max", type=int, default=116)
    p.add_argument("--size", type=int, default=300,
                   help="square image side in pixels")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="also write train/test manifests at this split")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("gen-gt",
                       help="render ground-truth maps for a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("augment",
                       help="expand a corpus into training patches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train on a patch directory")
    p.add_argument("--patches", required=True,
                   help="directory written by the augment command")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--config", default=None,
                   help="key=value or JSON file of config overrides")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--log", default=None, help="JSONL training log path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None,
                   help="checkpoint file to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict counts for images")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="peak threshold on the localization map")
    p.add_argument("--out", default=None,
                   help="JSON records path (stdout if omitted)")
    p.add_argument("--emit-maps", default=None,
                   help="directory for per-image density/loc maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against points")
    p.add_argument("--pred", required=True, help="infer output JSON")
    p.add_argument("--gt", required=True, help="points file (CSV/JSON)")
    p.add_argument("--count-source", default="avg",
                   choices=("avg", "density", "peak"))
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("yield", help="estimate bushels per acre")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--heads-per-foot", type=float, default=None)
    g.add_argument("--from-prediction", default=None,
                   help="infer output JSON to average counts from")
    p.add_argument("--feet-per-image", type=float, default=None,
                   help="row feet covered by one image")
    p.add_argument("--kernels", type=float,
                   default=DEFAULT_KERNELS_PER_HEAD)
    p.add_argument("--spacing-in", type=float, default=12.0)
    p.set_defaults(func=cmd_yield)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, AutodiffError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
