"""End-to-end evaluation: distort, classify, explain, cluster, score, report.

Work is split into independent (image, distortion family) units that may run
on a thread pool (``XSTAB_THREADS``); every reduction walks the results in
(image id, level, variant) order so the output is byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from . import __version__
from .core import ensure_dir, load_image, save_image
from .distortions import DistortionSpec, default_spec, derive_seed, distort_variant
from .errors import (
    ConfigError,
    DataError,
    EmptyLevelError,
    FormatError,
    IdenticalInputsError,
    ImageIOError,
    LengthMismatchError,
    XstabError,
    ZeroBaselineError,
    ZeroVarianceError,
    ZeroMassError,
)
from .explainers import FemParams, FusionWeights, fem, fit_fusion_weights, gradcam, mlfem, mlfem_layer_maps
from .metrics import aggregate, image_distance, lipschitz_ratio, pcc, sim, stability_series, theoretical_radius
from .metrics import consensus as _consensus
from .model import ToyCNN, synth_dataset, synth_fixations, train
from .reference import FixationSet, default_sigma, gfdm, load_fixations, write_fixations_csv

EXPLAINERS = ("fem", "mlfem", "gradcam")
CLUSTERS = ("well", "badly")
METRICS = ("L", "PCC", "SIM")
CONSENSUS_CELLS = (("L", "PCC"), ("L", "SIM"), ("PCC", "SIM"))
AGGREGATIONS = ("max", "per_variant")
IMAGE_SUFFIXES = (".png", ".ppm")


def cell_name(a: str, b: str) -> str:
    return f"{a}->{b}"


@dataclass
class RunConfig:
    image_dir: str
    fixations: str
    out: str = "out"
    model: str | None = None
    train_toy: int | None = None
    train_samples: int = 300
    explainers: list = field(default_factory=lambda: list(EXPLAINERS))
    distortions: list = field(default_factory=list)
    fem: FemParams = field(default_factory=FemParams)
    sigma_fov: float | None = None
    lipschitz_aggregation: str = "max"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, custom: dict | None = None) -> "RunConfig":
        """Build a config from parsed JSON; ``custom`` names extra explainers."""
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for required in ("image_dir", "fixations"):
            if required not in d:
                raise ConfigError(f"missing config field {required!r}")
        seed = int(d.get("seed", 0))
        specs = []
        try:
            for i, sd in enumerate(d.get("distortions") or []):
                if isinstance(sd, str):
                    sd = {"family": sd}
                sd = dict(sd)
                if "seed" not in sd:
                    sd["seed"] = derive_seed(seed, sd.get("name") or sd["family"], i, 0)
                if "variants" not in sd and "levels" not in sd:
                    specs.append(default_spec(sd["family"], sd["seed"]))
                else:
                    if "variants" not in sd:
                        sd["variants"] = default_spec(sd["family"]).variants
                    specs.append(DistortionSpec.from_dict(sd))
            fem_cfg = d.get("fem") or {}
            fem_params = fem_cfg if isinstance(fem_cfg, FemParams) else FemParams(**fem_cfg)
        except (XstabError, TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        d["distortions"] = specs
        d["fem"] = fem_params
        d["seed"] = seed
        cfg = cls(**d)
        cfg.validate(check_paths=False, custom=custom)
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "image_dir": str(self.image_dir),
            "fixations": str(self.fixations),
            "out": str(self.out),
            "model": self.model,
            "train_toy": self.train_toy,
            "train_samples": self.train_samples,
            "explainers": list(self.explainers),
            "distortions": [s.to_dict() for s in self.distortions],
            "fem": {"K": self.fem.K},
            "sigma_fov": self.sigma_fov,
            "lipschitz_aggregation": self.lipschitz_aggregation,
            "seed": self.seed,
        }

    def validate(self, check_paths: bool = True, custom: dict | None = None) -> None:
        if not self.explainers:
            raise ConfigError("at least one explainer is required")
        allowed = set(EXPLAINERS) | set(custom or {})
        bad = [e for e in self.explainers if e not in allowed]
        if bad:
            raise ConfigError(f"unknown explainers {bad}; choose from {sorted(allowed)}")
        if len(set(self.explainers)) != len(self.explainers):
            raise ConfigError("explainer list has duplicates")
        if not self.distortions:
            raise ConfigError("at least one distortion family is required")
        labels = [s.label for s in self.distortions]
        if len(set(labels)) != len(labels):
            raise ConfigError("distortion families must have distinct names")
        if self.lipschitz_aggregation not in AGGREGATIONS:
            raise ConfigError(f"lipschitz_aggregation must be one of {AGGREGATIONS}")
        if self.sigma_fov is not None and not self.sigma_fov > 0:
            raise ConfigError("sigma_fov must be positive")
        if self.model is None and not self.train_toy:
            raise ConfigError("give a model path or train_toy epochs")
        if check_paths:
            for name in ("image_dir", "fixations") + (("model",) if self.model else ()):
                p = getattr(self, name)
                if not Path(p).exists():
                    raise ConfigError(f"{name} path does not exist: {p}")


@dataclass(frozen=True)
class SampleRecord:
    """One (image, family, level, variant, explainer) evaluation."""

    image_id: str
    family: str
    level_index: int
    variant: int
    explainer: str
    label: int
    cluster: str
    ratio: float
    pcc: float | None
    sim: float | None


@dataclass
class ClusteredResults:
    records: list
    skipped: dict  # (family, level_index) -> count of identical-image variants
    distances: dict  # (family, level_index) -> max image distance


@dataclass
class EvaluationReport:
    data: dict
    results: ClusteredResults | None = None

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def cluster(original_label, distorted_label) -> str:
    return "well" if original_label == distorted_label else "badly"


# ---------------------------------------------------------------------------
# inputs


def load_image_dir(image_dir) -> dict:
    paths = sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"no PNG/PPM images in {image_dir}")
    images = {}
    for p in paths:
        if p.stem in images:
            raise DataError(f"duplicate image id {p.stem!r}")
        images[p.stem] = load_image(p)
    return images


def make_desk_corpus(out_dir, n_images: int = 10, seed: int = 1234, n_fixations: int = 15) -> dict:
    """Write held-out synthetic-shape images plus a fixation CSV.

    Fixations are sampled inside each shape, mimicking observers who click on
    the object. Returns ``{"image_dir": ..., "fixations": ...}``.
    """
    out_dir = ensure_dir(out_dir)
    img_dir = ensure_dir(out_dir / "images")
    rng = np.random.default_rng(seed)
    fix = {}
    for i, (img, _, mask) in enumerate(synth_dataset(n_images, seed, return_masks=True)):
        image_id = f"img{i:03d}"
        save_image(img, img_dir / f"{image_id}.png")
        fix[image_id] = synth_fixations(mask, n_fixations, rng)
    fix_path = out_dir / "fixations.csv"
    write_fixations_csv(fix, fix_path)
    return {"image_dir": str(img_dir), "fixations": str(fix_path)}


def build_model(config: RunConfig) -> tuple:
    if config.model:
        return ToyCNN.load(config.model), {"source": "file", "path": str(config.model)}
    train_seed = derive_seed(config.seed, "train", 0, 0)
    data = synth_dataset(config.train_samples, train_seed)
    base = ToyCNN()
    model = train(base, data, epochs=int(config.train_toy), seed=train_seed)
    return model, {"source": "train_toy", "epochs": int(config.train_toy), "samples": config.train_samples, "seed": train_seed}


# ---------------------------------------------------------------------------
# explainers


def builtin_explainers(params: FemParams, fusion: FusionWeights | None) -> dict:
    def _fem(model, cache, img):
        h, w = img.shape[:2]
        return fem(cache.activations[-1], params, w, h)

    def _gradcam(model, cache, img):
        h, w = img.shape[:2]
        last = model.n_layers - 1
        g = model.grad_wrt_activation(cache, cache.label, last)
        return gradcam(cache.activations[last], g, w, h)

    def _mlfem(model, cache, img):
        h, w = img.shape[:2]
        return mlfem(mlfem_layer_maps(cache, params, w, h), fusion)

    out = {"fem": _fem, "gradcam": _gradcam}
    if fusion is not None:
        out["mlfem"] = _mlfem
    return out


def _safe(fn, *args):
    try:
        return fn(*args)
    except (ZeroVarianceError, ZeroMassError):
        return None


# ---------------------------------------------------------------------------
# evaluation


def _thread_count() -> int:
    raw = os.environ.get("XSTAB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"XSTAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("XSTAB_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _evaluate_unit(model, spec, image_id, img, ref_label, ref_maps, gt, explain):
    records, skipped, dist = [], {}, {}
    for li in range(len(spec.levels)):
        for vi in range(spec.variants):
            try:
                x2, _ = distort_variant(img, spec, image_id, li, vi)
                d = image_distance(img, x2)
                dist[li] = max(dist.get(li, 0.0), d)
                if d == 0:
                    skipped[li] = skipped.get(li, 0) + 1
                    continue
                cache = model.forward(x2)
                grp = cluster(ref_label, cache.label)
                for name, fn in explain.items():
                    e2 = fn(model, cache, x2)
                    ratio = lipschitz_ratio(img, x2, ref_maps[name], e2)
                    records.append(
                        SampleRecord(image_id, spec.label, li, vi, name, cache.label, grp, ratio, _safe(pcc, e2, gt), _safe(sim, e2, gt))
                    )
            except IdenticalInputsError:
                skipped[li] = skipped.get(li, 0) + 1
            except XstabError as exc:
                raise type(exc)(f"image {image_id!r}, {spec.label} level {li}, variant {vi}: {exc}") from exc
    return records, skipped, dist


def run_evaluation(config: RunConfig, explainers: dict | None = None, model: ToyCNN | None = None) -> EvaluationReport:
    """Run the full protocol and return the aggregated report.

    ``explainers`` may add (or override) named explainer callables
    ``fn(model, cache, image) -> map``; ``model`` skips loading/training.
    """
    if model is None:
        config.validate(check_paths=True, custom=explainers)
    else:
        _validate_with_model(config, explainers)
    images = load_image_dir(config.image_dir)
    fix = load_fixations(config.fixations)
    missing = sorted(set(images) - set(fix))
    if missing:
        raise DataError(f"no fixations for images {missing}")

    if model is None:
        model, model_info = build_model(config)
    else:
        model_info = {"source": "in-memory"}

    ref_caches, gfdms = {}, {}
    for image_id, img in images.items():
        h, w = img.shape[:2]
        ref_caches[image_id] = model.forward(img)
        sigma = config.sigma_fov or default_sigma(w)
        gfdms[image_id] = gfdm(FixationSet(image_id, fix[image_id], w, h), sigma)

    fusion = None
    if "mlfem" in config.explainers and "mlfem" not in (explainers or {}):
        layer_maps = [mlfem_layer_maps(ref_caches[i], config.fem, *images[i].shape[1::-1]) for i in images]
        fusion = fit_fusion_weights(layer_maps, [gfdms[i] for i in images])

    available = builtin_explainers(config.fem, fusion)
    available.update(explainers or {})
    explain = {name: available[name] for name in config.explainers}

    ref_maps = {
        image_id: {name: fn(model, ref_caches[image_id], img) for name, fn in explain.items()}
        for image_id, img in images.items()
    }

    units = [(spec, image_id) for spec in config.distortions for image_id in images]

    def work(unit):
        spec, image_id = unit
        return _evaluate_unit(
            model, spec, image_id, images[image_id], ref_caches[image_id].label, ref_maps[image_id], gfdms[image_id], explain
        )

    threads = min(_thread_count(), len(units))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(work, units))
    else:
        outputs = [work(u) for u in units]

    records, skipped, distances = [], {}, {}
    for (spec, _), (recs, skip, dist) in zip(units, outputs):
        records.extend(recs)
        for li, n in skip.items():
            skipped[(spec.label, li)] = skipped.get((spec.label, li), 0) + n
        for li, d in dist.items():
            distances[(spec.label, li)] = max(distances.get((spec.label, li), 0.0), d)
    results = ClusteredResults(records, skipped, distances)

    data = summarize(config, images, ref_caches, results, model_info, fusion)
    return EvaluationReport(data, results)


def _validate_with_model(config, explainers):
    saved = config.model, config.train_toy
    config.train_toy = config.train_toy or 1
    try:
        config.validate(check_paths=False, custom=explainers)
    finally:
        config.model, config.train_toy = saved
    for name in ("image_dir", "fixations"):
        if not Path(getattr(config, name)).exists():
            raise ConfigError(f"{name} path does not exist: {getattr(config, name)}")


def _stats(values, level):
    try:
        return aggregate(values, level).to_dict()
    except EmptyLevelError:
        return None


def level_samples(records, aggregation: str) -> dict:
    """Group metric samples by (explainer, family, cluster, level_index, metric).

    Lipschitz samples under ``max`` aggregation are the per-image maxima over
    the variants of a level that fall into the cluster.
    """
    out: dict = {}
    per_image: dict = {}
    for r in records:
        key = (r.explainer, r.family, r.cluster, r.level_index)
        if aggregation == "max":
            k = key + (r.image_id,)
            per_image[k] = max(per_image.get(k, r.ratio), r.ratio)
        else:
            out.setdefault(key + ("L",), []).append(r.ratio)
        if r.pcc is not None:
            out.setdefault(key + ("PCC",), []).append(r.pcc)
        if r.sim is not None:
            out.setdefault(key + ("SIM",), []).append(r.sim)
    for k, v in per_image.items():
        out.setdefault(k[:4] + ("L",), []).append(v)
    return out


def _stability(series_l):
    means = [None if s is None else s["mean"] for s in series_l]
    out = []
    for j in range(len(means) - 1):
        a, b = means[j], means[j + 1]
        if a is None or b is None:
            out.append(None)
            continue
        try:
            out.append(stability_series([a, b])[0])
        except ZeroBaselineError:
            out.append(None)
    return out


def _consensus_cell(sa, sb):
    if len(sa) < 2 or any(s is None for s in sa) or any(s is None for s in sb):
        return None
    try:
        return _consensus([s["mean"] for s in sa], [s["mean"] for s in sb])
    except (ZeroVarianceError, LengthMismatchError):
        return None


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def summarize(config, images, ref_caches, results, model_info, fusion) -> dict:
    samples = level_samples(results.records, config.lipschitz_aggregation)
    w, h = next(iter(images.values())).shape[1::-1]
    blocks = []
    diagnostics = []
    counts = []
    for spec in config.distortions:
        levels = [spec.level_value(i) for i in range(len(spec.levels))]
        diagnostics.append(
            {
                "family": spec.label,
                "theoretical_radius": theoretical_radius(w, h),
                "max_distance": [results.distances.get((spec.label, i), 0.0) for i in range(len(levels))],
                "skipped": [results.skipped.get((spec.label, i), 0) for i in range(len(levels))],
            }
        )
        for li, level in enumerate(levels):
            row = {"family": spec.label, "level": level, "expected": len(images) * spec.variants}
            for grp in CLUSTERS:
                row[grp] = len(
                    {
                        (r.image_id, r.variant)
                        for r in results.records
                        if r.family == spec.label and r.level_index == li and r.cluster == grp
                    }
                )
            row["skipped"] = results.skipped.get((spec.label, li), 0)
            counts.append(row)
        for name in config.explainers:
            for grp in CLUSTERS:
                series = {
                    m: [_stats(samples.get((name, spec.label, grp, li, m), []), lv) for li, lv in enumerate(levels)]
                    for m in METRICS
                }
                stab = _stability(series["L"])
                blocks.append(
                    {
                        "explainer": name,
                        "family": spec.label,
                        "cluster": grp,
                        "levels": levels,
                        "series": series,
                        "stability": [
                            {"from": levels[j], "to": levels[j + 1], "s": stab[j]} for j in range(len(levels) - 1)
                        ],
                        "consensus": {cell_name(a, b): _consensus_cell(series[a], series[b]) for a, b in CONSENSUS_CELLS},
                    }
                )
    cfg = config.to_dict()
    cfg.pop("out")  # where results go does not change them
    return {
        "format": "xstab-report/1",
        "provenance": {
            "config": cfg,
            "config_hash": _config_hash(cfg),
            "seed": config.seed,
            "distortion_seeds": {s.label: s.seed for s in config.distortions},
            "model": model_info,
            "fusion_weights": None if fusion is None else list(fusion.weights),
            "versions": {
                "xstab": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
        },
        "images": [{"image_id": i, "label": ref_caches[i].label, "score": ref_caches[i].score} for i in images],
        "counts": counts,
        "diagnostics": diagnostics,
        "results": blocks,
    }


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in s)


def report_tables(data: dict) -> dict:
    """Render the CSV side-files of a report as ``{filename: text}``."""
    files = {}
    cells = [cell_name(a, b) for a, b in CONSENSUS_CELLS]
    cons_rows = [
        [b["family"], b["cluster"], b["explainer"]] + [b["consensus"][c] for c in cells]
        for b in sorted(data["results"], key=_block_order(data))
    ]
    files["consensus.csv"] = _csv_text(["family", "cluster", "explainer"] + cells, cons_rows)
    grouped: dict = {}
    for b in data["results"]:
        grouped.setdefault((b["family"], b["explainer"]), []).append(b)
    for (family, name), blocks in grouped.items():
        blocks = sorted(blocks, key=lambda b: CLUSTERS.index(b["cluster"]))
        for m in METRICS:
            rows = []
            for b in blocks:
                for lv, st in zip(b["levels"], b["series"][m]):
                    rows.append([lv, b["cluster"]] + ([None] * 3 if st is None else [st["mean"], st["std"], st["count"]]))
            files[f"series_{m}_{_slug(family)}_{_slug(name)}.csv"] = _csv_text(["level", "cluster", "mean", "std", "count"], rows)
        rows = [[f"{s['from']:g}->{s['to']:g}", b["cluster"], s["s"]] for b in blocks for s in b["stability"]]
        files[f"stability_{_slug(family)}_{_slug(name)}.csv"] = _csv_text(["level_pair", "cluster", "s_percent"], rows)
    return files


def _block_order(data):
    fams = [d["family"] for d in data["diagnostics"]]
    names = data["provenance"]["config"]["explainers"]

    def key(b):
        return (fams.index(b["family"]), CLUSTERS.index(b["cluster"]), names.index(b["explainer"]) if b["explainer"] in names else 99)

    return key


def write_report(report, out_dir) -> list:
    """Write report.json and the CSV tables; returns the written paths."""
    data = report.data if isinstance(report, EvaluationReport) else report
    try:
        out = ensure_dir(out_dir)
        written = []
        p = out / "report.json"
        p.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")
        written.append(p)
        for name, text in report_tables(data).items():
            p = out / name
            p.write_text(text)
            written.append(p)
        if isinstance(report, EvaluationReport) and report.results is not None:
            rows = [
                [r.image_id, r.family, r.level_index, r.variant, r.explainer, r.label, r.cluster, r.ratio, r.pcc, r.sim]
                for r in report.results.records
            ]
            p = out / "samples.csv"
            p.write_text(
                _csv_text(["image_id", "family", "level_index", "variant", "explainer", "label", "cluster", "L_ratio", "PCC", "SIM"], rows)
            )
            written.append(p)
    except OSError as exc:
        raise ImageIOError(f"cannot write report to {out_dir}: {exc}") from exc
    return written


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def report_schema() -> dict:
    """JSON schema that every ``report.json`` validates against."""
    return json.loads(resources.files("xstab").joinpath("report_schema.json").read_text())
