"""Command line entry point: ``xstab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import load_image, minmax_normalize, save_image, save_npy
from .distortions import FAMILIES, DistortionSpec, default_spec, write_corpus
from .errors import ConfigError, XstabError
from .explainers import FemParams, FusionWeights, fem, gradcam, mlfem, mlfem_layer_maps, overlay
from .model import ToyCNN, synth_dataset, train
from .pipeline import RunConfig, load_report, make_desk_corpus, report_tables, run_evaluation, write_report
from .reference import FixationSet, gfdm, load_fixations

log = logging.getLogger("xstab")

EXIT_CONFIG = 2
EXIT_DATA = 3


def _map_png(m) -> np.ndarray:
    g = np.floor(np.clip(minmax_normalize(m), 0, 1) * 255 + 0.5).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def _model_from_args(args) -> ToyCNN:
    if args.model:
        return ToyCNN.load(args.model)
    if args.train_toy:
        data = synth_dataset(args.train_samples, args.seed)
        return train(ToyCNN(), data, epochs=args.train_toy, seed=args.seed)
    raise ConfigError("pass --model DIR or --train-toy EPOCHS")


def cmd_distort(args) -> int:
    src = Path(args.image)
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".ppm")) if src.is_dir() else [src]
    images = {p.stem: load_image(p) for p in paths}
    specs = []
    for fam in args.family:
        if args.levels or args.variants:
            base = default_spec(fam)
            levels = [float(x) for x in args.levels.split(",")] if args.levels else list(base.levels)
            specs.append(DistortionSpec(fam, tuple(levels), args.variants or base.variants, args.seed))
        else:
            specs.append(default_spec(fam, args.seed))
    manifest = write_corpus(images, specs, args.out)
    print(f"wrote {len(manifest['entries'])} images to {args.out}")
    return 0


def cmd_gfdm(args) -> int:
    img = load_image(args.image)
    h, w = img.shape[:2]
    image_id = args.image_id or Path(args.image).stem
    fix = load_fixations(args.fixations)
    if image_id not in fix:
        raise ConfigError(f"no fixations for image id {image_id!r}")
    m = gfdm(FixationSet(image_id, fix[image_id], w, h), args.sigma)
    save_npy(m, args.out)
    if args.png:
        save_image(_map_png(m), args.png)
    return 0


def cmd_explain(args) -> int:
    model = _model_from_args(args)
    img = load_image(args.image)
    h, w = img.shape[:2]
    cache = model.forward(img)
    params = FemParams(args.K)
    if args.explainer == "fem":
        m = fem(cache.activations[-1], params, w, h)
    elif args.explainer == "gradcam":
        last = model.n_layers - 1
        m = gradcam(cache.activations[last], model.grad_wrt_activation(cache, cache.label, last), w, h)
    else:
        if args.weights:
            weights = FusionWeights(tuple(float(x) for x in args.weights.split(",")))
        else:
            weights = FusionWeights.uniform(model.n_layers)
        m = mlfem(mlfem_layer_maps(cache, params, w, h), weights)
    save_npy(m, args.out)
    if args.overlay:
        save_image(overlay(img, m), args.overlay)
    print(json.dumps({"label": cache.label, "score": cache.score}))
    return 0


def cmd_evaluate(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["out"] = args.out
    if args.train_toy:
        raw["train_toy"] = args.train_toy
        raw["model"] = None
    # relative paths in the config resolve against the config's directory
    base = Path(args.config).resolve().parent
    for key in ("image_dir", "fixations", "model"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    config = RunConfig.from_dict(raw)
    report = run_evaluation(config)
    written = write_report(report, config.out)
    print(f"wrote {len(written)} files to {config.out}")
    return 0


def cmd_report(args) -> int:
    data = load_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).parent
    out.mkdir(parents=True, exist_ok=True)
    tables = report_tables(data)
    for name, text in tables.items():
        (out / name).write_text(text)
    sys.stdout.write(tables["consensus.csv"])
    return 0


def cmd_synth(args) -> int:
    paths = make_desk_corpus(args.out, args.n, args.seed)
    print(json.dumps(paths))
    return 0


def cmd_train(args) -> int:
    history: list = []
    data = synth_dataset(args.samples, args.seed)
    model = train(ToyCNN(), data, epochs=args.epochs, lr=args.lr, seed=args.seed, history=history)
    model.save(args.out)
    print(json.dumps({"loss": history}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xstab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distort", help="write a seeded distortion corpus")
    d.add_argument("--image", required=True, help="image file or directory")
    d.add_argument("--family", action="append", choices=FAMILIES, required=True)
    d.add_argument("--levels", help="comma-separated level grid (default: protocol grid)")
    d.add_argument("--variants", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distort)

    g = sub.add_parser("gfdm", help="build a gaze fixation density map")
    g.add_argument("--image", required=True)
    g.add_argument("--fixations", required=True)
    g.add_argument("--image-id")
    g.add_argument("--sigma", type=float)
    g.add_argument("--out", required=True, help="output .npy")
    g.add_argument("--png")
    g.set_defaults(func=cmd_gfdm)

    e = sub.add_parser("explain", help="explain one image")
    e.add_argument("--image", required=True)
    e.add_argument("--explainer", choices=("fem", "mlfem", "gradcam"), default="fem")
    e.add_argument("--model")
    e.add_argument("--train-toy", type=int, metavar="EPOCHS")
    e.add_argument("--train-samples", type=int, default=300)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--K", type=float, default=1.0)
    e.add_argument("--weights", help="comma-separated MLFEM layer weights")
    e.add_argument("--out", required=True, help="output .npy")
    e.add_argument("--overlay", help="optional heat-map overlay PNG")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="run the full evaluation protocol")
    v.add_argument("--config", required=True)
    v.add_argument("--out")
    v.add_argument("--seed", type=int)
    v.add_argument("--train-toy", type=int, metavar="EPOCHS")
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="re-render CSV tables from report.json")
    r.add_argument("--report", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="write a synthetic-shapes desk corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=1234)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the toy CNN and save its bundle")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--samples", type=int, default=300)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (XstabError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
