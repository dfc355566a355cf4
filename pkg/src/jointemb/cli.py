"""``jointemb`` command line.

Outputs go to files; stdout only lists the paths that were written, one per
line. Exit codes: 0 success, 1 usage or config error, 2 data error,
3 non-finite numerics.
"""

from __future__ import annotations

import argparse
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import data as D
from . import embedder as E
from . import evaluate as V
from . import prnu as P
from .config import METRICS, ConfigError, coerce, load_config, parse_kv
from .kernels import NonFiniteError

log = logging.getLogger("jointemb")

WORKERS_ENV = "JEMB_WORKERS"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_SYNTH_TYPES = {"n_subjects": "int", "n_sensors": "int", "images_per_class": "int",
                "size": "int", "bandwidth": "float", "sigma_k": "float",
                "sigma_eta": "float", "jitter": "int", "seed": "int"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonLines(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name,
                           "msg": record.getMessage()})


def _attach_log(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(_JsonLines())
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"cannot parse {raw!r} as int") from None
    if n < 1:
        raise ConfigError(WORKERS_ENV, "must be >= 1")
    return n


def _run_config(args, **extra):
    overrides = {"mode": args.mode, "loss": args.loss, "k": args.k, "seed": args.seed,
                 "metric": getattr(args, "metric", None), **extra}
    return load_config(args.config, overrides)


def _load_split(manifest, split):
    samples = D.read_manifest(manifest)
    D.build_joint_labels(samples)
    if split != "all":
        if any(s.split is None for s in samples):
            raise D.DataError(f"{manifest}: samples lack split tags; run synth or split first")
        samples = D.select_split(samples, split)
    if not samples:
        raise D.DataError(f"{manifest}: no samples in split {split!r}")
    return samples


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    values = {}
    if args.config:
        values.update(parse_kv(Path(args.config).read_text(), _SYNTH_TYPES))
    flags = {"n_subjects": args.subjects, "n_sensors": args.sensors,
             "images_per_class": args.images, "bandwidth": args.bandwidth,
             "sigma_k": args.sigma_k, "sigma_eta": args.sigma_eta, "jitter": args.jitter,
             "seed": args.seed}
    values.update({k: coerce(k, v, _SYNTH_TYPES) for k, v in flags.items() if v is not None})
    try:
        cfg = D.SynthConfig(**values)
    except ValueError as exc:
        key = str(exc).split(" ", 1)[0]
        raise ConfigError(key, str(exc)) from None
    out = Path(args.out)
    samples = D.generate_synthetic(cfg, out)
    D.split_70_30(samples, cfg.seed)
    D.write_manifest(samples, out / "manifest.json")
    return [out / "manifest.json"]


def cmd_train(args):
    from .train import train

    cfg = _run_config(args, epochs=args.epochs, manifest=args.manifest)
    if not cfg.manifest:
        raise ConfigError("manifest", "no manifest given (--manifest or config key)")
    model_path = Path(args.out or cfg.model or "model.jemb")
    samples = _load_split(cfg.manifest, "train")
    _, n_classes = D.build_joint_labels(D.read_manifest(cfg.manifest))
    images = D.load_images(samples)
    labels = np.array([s.class_index for s in samples])
    model_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = model_path.with_name(model_path.name + ".log.jsonl")
    result = train(images, labels, cfg, n_classes=n_classes, log_path=log_path)
    E.save_model(result.params, model_path)
    _write_json(model_path.with_name(model_path.name + ".config.json"), asdict(cfg))
    return [model_path, log_path]


def embed_parallel(images, params, n_workers=1, chunk=64):
    """Embed in chunks, fanning chunks out over threads when ``n_workers > 1``."""
    if n_workers <= 1 or len(images) <= chunk:
        return E.embed_batch(images, params, chunk)
    parts = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    with ThreadPoolExecutor(n_workers) as pool:
        return np.concatenate(list(pool.map(lambda x: E.embed_batch(x, params, chunk), parts)))


def cmd_embed(args):
    params = E.load_model(args.model)
    samples = _load_split(args.manifest, args.split)
    values = embed_parallel(D.load_images(samples), params, workers())
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("model produced non-finite embeddings")
    es = V.EmbeddingSet(values, [s.subject_id for s in samples],
                        [s.sensor_id for s in samples], [s.sample_id for s in samples])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    V.write_embeddings(es, out)
    return [out]


def cmd_eval_id(args):
    from . import plots

    es = V.read_embeddings(args.embeddings)
    rep = V.joint_identification(es, args.metric, args.ranks, args.gallery, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"cmc_{args.metric}"
    paths = [_write_json(stem.with_suffix(".json"), {"kind": "cmc", **rep.to_dict()}),
             _write_csv(stem.with_suffix(".csv"), ["rank", "rate"], zip(rep.ranks, rep.rates)),
             plots.plot_cmc(rep, stem.with_suffix(".png"))]
    return paths


def cmd_eval_verif(args):
    from . import plots

    es = V.read_embeddings(args.embeddings)
    rep = V.joint_verification(es, args.metric)
    # breakdown at the operating point closest to 5% FMR without exceeding it
    i = max(j for j, f in enumerate(rep.fmr) if f <= 0.05)
    thr = rep.thresholds[i]
    breakdown = V.impostor_breakdown(es, args.metric, thr) if np.isfinite(thr) else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"roc_{args.metric}"
    doc = {"kind": "roc", **rep.to_dict(),
           "thresholds": [t if np.isfinite(t) else None for t in rep.thresholds],
           "breakdown_threshold": thr if np.isfinite(thr) else None,
           "impostor_breakdown": breakdown}
    paths = [_write_json(stem.with_suffix(".json"), doc),
             _write_csv(stem.with_suffix(".csv"), ["fmr", "tmr"], zip(rep.fmr, rep.tmr)),
             plots.plot_roc(rep, stem.with_suffix(".png"))]
    return paths


def cmd_prnu_build(args):
    samples = _load_split(args.manifest, args.split)
    images = D.load_images(samples)
    gallery = P.build_gallery(images, [s.sensor_id for s in samples], not args.no_enhance)
    P.save_gallery(gallery, args.out)
    return [Path(args.out) / f"{g.sensor_id}.prnu" for g in gallery]


def cmd_prnu_id(args):
    gallery = P.load_gallery(args.gallery)
    if args.image:
        samples = [D.ImageSample(args.image, "", "")]
    elif args.manifest:
        samples = _load_split(args.manifest, args.split)
    else:
        raise UsageError("prnu-id needs --manifest or --image")
    enhance = not args.no_enhance
    rows, hits = [], []
    for s in samples:
        sid, scores = P.identify_sensor(D.load_and_resize(s), gallery, enhance)
        rows.append({"sample_id": s.sample_id, "true_sensor": s.sensor_id or None,
                     "assigned_sensor": sid, "scores": scores})
        if s.sensor_id:
            hits.append(sid == s.sensor_id)
    doc = {"kind": "prnu_id", "sensors": [g.sensor_id for g in gallery], "enhance": enhance,
           "n_images": len(rows), "accuracy": float(np.mean(hits)) if hits else None,
           "assignments": rows}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = [[r["sample_id"], r["true_sensor"] or "", r["assigned_sensor"], *r["scores"]]
             for r in rows]
    return [_write_json(out / "prnu_id.json", doc),
            _write_csv(out / "prnu_id.csv", ["sample_id", "true_sensor", "assigned_sensor",
                                             *doc["sensors"]], table)]


def cmd_sweep_dim(args):
    from . import plots

    cfg = _run_config(args, epochs=args.epochs, manifest=args.manifest)
    if not cfg.manifest:
        raise ConfigError("manifest", "no manifest given (--manifest or config key)")
    try:
        dims = [int(d) for d in args.dims.split(",")]
    except ValueError:
        raise ConfigError("dims", f"expected comma-separated integers, got {args.dims!r}") from None
    samples = _load_split(cfg.manifest, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = V.sweep_dimension(D.load_images(samples), [s.subject_id for s in samples],
                               [s.sensor_id for s in samples], [s.sample_id for s in samples],
                               cfg, dims, log_dir=out)
    rows = [[r["k"], r["tmr_at_5"], r["tmr_at_1"], r["rank1"]] for r in result["rows"]]
    return [_write_json(out / "sweep.json", {"kind": "sweep", **result}),
            _write_csv(out / "sweep.csv", ["k", "tmr_at_5", "tmr_at_1", "rank1"], rows),
            plots.plot_sweep(result, out / "sweep.png")]


# -- argument parsing -------------------------------------------------------------

def _run_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--mode", choices=["classical", "siamese", "triplet"])
    p.add_argument("--loss")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--manifest")


def build_parser():
    parser = _Parser(prog="jointemb", description="Joint subject and sensor embeddings.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--sensors", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--sigma-k", type=float)
    p.add_argument("--sigma-eta", type=float)
    p.add_argument("--jitter", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedder on the train split")
    _run_flags(p)
    p.add_argument("--out", help="model file (default: config key 'model' or model.jemb)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed one split into a JSON-lines store")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func, helptext in (("eval-id", cmd_eval_id, "joint identification (CMC)"),
                                 ("eval-verif", cmd_eval_verif, "joint verification (ROC)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--embeddings", required=True)
        p.add_argument("--metric", choices=METRICS, default="seuclidean")
        p.add_argument("--out", required=True, help="report directory")
        if name == "eval-id":
            p.add_argument("--ranks", type=int, default=3)
            p.add_argument("--gallery", choices=["first", "random"], default="first")
            p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("prnu-build", help="build per-sensor reference patterns")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--out", required=True, help="gallery directory")
    p.add_argument("--no-enhance", action="store_true")
    p.set_defaults(func=cmd_prnu_build)

    p = sub.add_parser("prnu-id", help="assign images to the best-correlated sensor")
    p.add_argument("--gallery", required=True)
    p.add_argument("--manifest")
    p.add_argument("--image")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-enhance", action="store_true")
    p.set_defaults(func=cmd_prnu_id)

    p = sub.add_parser("sweep-dim", help="train and validate one model per embedding size")
    _run_flags(p)
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--dims", default="4,8,16,32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_dim)
    return parser


def _log_path(args):
    if args.command in ("train",):
        base = Path(args.out or "model.jemb").parent
    elif args.command == "embed":
        base = Path(args.out).parent
    else:
        base = Path(args.out)
    return base / f"{args.command}.log.jsonl"


def main(argv=None):
    handler = None
    try:
        args = build_parser().parse_args(argv)
        handler = _attach_log(_log_path(args))
        paths = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, E.ModelFileError, V.EvalError, P.PrnuError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
