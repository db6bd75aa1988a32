"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure (including a
failed toy check or a model below its accuracy floor).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attribution import ABLATIONS, MethodConfig, attribute, parse_method
from .evaluate import METRICS, run_evaluation, summarize_records
from .io import ModelFileError, UnsupportedImage, export_heatmap, load_dataset, load_image, load_model, save_model, write_dataset
from .layers import LayerShapeError
from .model import predict
from .report import render_figures, summary_table, write_records

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("relprop")


class UsageError(Exception):
    pass


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("RELPROP_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RELPROP_SEED={env!r} is not an integer") from None


def method_configs(args) -> list[MethodConfig]:
    out = []
    for text in args.method.split(","):
        kw = {"ablation": args.ablation}
        if args.epsilon_rule is not None:
            kw["epsilon"] = args.epsilon_rule
        if args.contrastive:
            kw["contrastive"] = True
        kw["seed"] = args.seed
        try:
            out.append(parse_method(text.strip(), **kw))
        except ValueError as e:
            raise UsageError(str(e)) from None
    return out


def _add_method_flags(p):
    p.add_argument("--method", default="abslrp", help="comma-separated methods; lrp-alphabeta:2,1 sets alpha and beta")
    p.add_argument("--contrastive", action="store_true", help="use the contrastive output seed for every method")
    p.add_argument("--ablation", default="none", choices=ABLATIONS)
    p.add_argument("--rule-epsilon", dest="epsilon_rule", type=float, default=None, help="stabilizer of the LRP rules")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relprop", description="Relevance propagation attributions and their evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="attribution maps and heatmaps for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", "--data", dest="image", required=True, help="PGM/PPM image")
    p.add_argument("--target", type=int, default=None, help="class index (default: predicted class)")
    _add_method_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="GAE and baseline metrics over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory (one subdirectory per class)")
    p.add_argument("--split", default=None, help="manifest split to use")
    _add_method_flags(p)
    p.add_argument("--metrics", default="gae", help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--T", type=int, default=10, help="masking steps")
    p.add_argument("--k", type=float, default=0.02, help="fraction of pixels masked per step")
    p.add_argument("--L", type=int, default=None, help="perturbation regions for AOPC/ABPC")
    p.add_argument("--region", type=int, default=None, help="side of the square perturbation region")
    p.add_argument("--epsilon", type=float, default=0.1, help="radius of the Lipschitz ball")
    p.add_argument("--samples", type=int, default=10, help="Lipschitz Monte Carlo samples")
    p.add_argument("--groups", type=int, default=100)
    p.add_argument("--skip-misclassified", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="-", help="JSON-lines report path ('-' for stdout)")
    p.add_argument("--figures", default=None, help="directory for PNG figures")

    sub.add_parser("toycheck", help="check absLRP and LRP-alpha1beta0 on the toy networks")

    p = sub.add_parser("train", help="train a fixture classifier")
    p.add_argument("--arch", choices=("mlp", "cnn", "tiny-vit"), required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: synthetic fixture data)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--floor", type=float, default=None, help="held-out accuracy floor")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="model file path")

    p = sub.add_parser("make-data", help="write a synthetic digit dataset")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--eval-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    return parser


def _check_positive(name, value, strict=True):
    if value is not None and (value <= 0 if strict else value < 0):
        raise UsageError(f"--{name} must be {'positive' if strict else 'non-negative'}")


def cmd_attribute(args) -> int:
    methods = method_configs(args)
    model = load_model(args.model)
    x = load_image(args.image, model.input_shape)
    target = int(np.argmax(predict(model, x[None])[0])) if args.target is None else args.target
    if not 0 <= target < model.n_classes:
        raise UsageError(f"--target {target} out of range for {model.n_classes} classes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for cfg in methods:
        amap = attribute(model, x, target, cfg)
        name = f"{stem}.{cfg.label}"
        (out / f"{name}.f64").write_bytes(np.ascontiguousarray(amap.values, dtype="<f8").tobytes())
        meta = {"method": cfg.label, "target": target, "shape": list(amap.values.shape), "dtype": "<f8", "image": str(args.image)}
        (out / f"{name}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        export_heatmap(amap.values, x, out / f"{name}.ppm")
        print(f"{cfg.label}: wrote {out / name}.{{f64,json,ppm}}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metric(s) {bad}; choose from {', '.join(METRICS)}")
    for name in ("T", "groups", "jobs", "samples", "region"):
        _check_positive(name, getattr(args, name))
    _check_positive("L", args.L, strict=False)
    _check_positive("epsilon", args.epsilon)
    if not 0 < args.k * args.T <= 1:
        raise UsageError("need 0 < k*T <= 1")
    methods = method_configs(args)
    model = load_model(args.model)
    data = load_dataset(args.data, model.input_shape, args.split)
    if len(data) < 4:
        raise UsageError(f"dataset {args.data} has {len(data)} usable images; evaluation needs at least 4")
    images, labels = data.arrays()
    records = run_evaluation(
        model,
        images,
        labels,
        methods,
        metrics,
        groups=args.groups,
        jobs=args.jobs,
        seed=args.seed,
        T=args.T,
        k=args.k,
        L=args.L,
        region=args.region,
        epsilon=args.epsilon,
        samples=args.samples,
        skip_misclassified=args.skip_misclassified,
        curves=args.figures is not None,
    )
    curves: dict = {}
    for r in records:
        c = r.pop("curves", None)
        if c:
            curves.setdefault(r["method"], []).append(c)
    summaries = summarize_records(records)
    if args.out == "-":
        write_records(sys.stdout, records + summaries)
    else:
        with open(args.out, "w") as f:
            write_records(f, records + summaries)
    print(summary_table(summaries), file=sys.stderr)
    if args.figures:
        mean_curves = {m: {k: np.mean([c[k] for c in cs], axis=0) for k in cs[0]} for m, cs in curves.items()}
        for p in render_figures(args.figures, records, summaries, mean_curves or None):
            print(f"figure: {p}", file=sys.stderr)
    return EXIT_OK


def cmd_toycheck(args) -> int:
    from .toy import toycheck

    result = toycheck()
    for r in result.rows:
        status = "ok" if r["ok"] else "FAIL"
        got = ", ".join(f"{v:.6f}" for v in r["got"])
        print(f"{status:4s} {r['case']:13s} {r['rule']:9s} [{got}] expected {r['want']}")
    print(f"toycheck {'passed' if result.passed else 'FAILED'} in {result.seconds * 1000:.1f} ms")
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_train(args) -> int:
    from .train import FIXTURES, fixture_data, train_fixture

    recipe = FIXTURES[args.arch]
    if args.data:
        shape = _dataset_shape(args.data)
        if (Path(args.data) / "manifest.json").exists():
            train_set = load_dataset(args.data, shape, "train")
            eval_set = load_dataset(args.data, shape, "eval")
        else:
            train_set, eval_set = load_dataset(args.data, shape), None
    else:
        train_set, eval_set = fixture_data(args.arch, recipe["n"], args.seed), None
    model = train_fixture(
        args.arch,
        train_set,
        args.epochs or recipe["epochs"],
        args.lr or recipe["lr"],
        args.seed,
        eval_data=eval_set,
        floor=args.floor,
    )
    save_model(model, args.out)
    print(f"held-out accuracy {model.meta['heldout_accuracy']:.4f}; wrote {args.out}")
    return EXIT_OK


def _dataset_shape(path):
    """Shape of the first image, which fixes the input shape for training."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            try:
                return load_image(f).shape
            except (UnsupportedImage, OSError):
                continue
    raise ValueError(f"{root} contains no readable images")


def cmd_make_data(args) -> int:
    from .synthetic import make_digits

    _check_positive("n", args.n)
    images, labels = make_digits(args.n, seed=args.seed)
    root = write_dataset(args.out, images, labels, eval_fraction=args.eval_fraction)
    print(f"wrote {args.n} images to {root}")
    return EXIT_OK


COMMANDS = {
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "toycheck": cmd_toycheck,
    "train": cmd_train,
    "make-data": cmd_make_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed"):
            args.seed = resolve_seed(args.seed)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"relprop: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ModelFileError, UnsupportedImage) as e:
        print(f"relprop: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ArithmeticError, LayerShapeError) as e:
        print(f"relprop: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as e:  # accuracy floor
        print(f"relprop: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"relprop: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
