"""Command-line surface: make-gt, train, evaluate, predict, benchmark, gradcheck.

Every run writes a RunManifest JSON (resolved config, seed, inputs,
outputs, timestamps, artifact checksums) into the output directory, so a
seeded single-threaded run can be reproduced bit-for-bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 gradient-check failure.
"""

import argparse
import dataclasses
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import groundtruth, metrics, serialize, training
from .errors import DataError, NumericalError, UsageError
from .model import build_model, count_macs, default_config, init_weights, tiny_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
EXIT_GRADCHECK = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class Manifest:
    def __init__(self, command, config, seed, inputs):
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": [str(p) for p in inputs],
            "outputs": [],
            "checksums": {},
            "started": _utcnow(),
        }

    def add_output(self, path):
        self.doc["outputs"].append(str(path))
        self.doc["checksums"][str(path)] = _sha256(path)

    def write(self, out_dir):
        self.doc["finished"] = _utcnow()
        with open(Path(out_dir) / "manifest.json", "w") as f:
            json.dump(self.doc, f, indent=2)


def load_config_file(path):
    """Flat key=value config file; '#' starts a comment."""
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        cfg[k.strip()] = v.strip()
    return cfg


def resolve_config(args):
    """defaults < config file < --set overrides (last wins)."""
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k] = v
    return cfg


_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(training.TrainConfig)}


def build_train_config(cfg, seed):
    kwargs = {"seed": seed}
    for k, v in cfg.items():
        if k in ("model", "q", "grid"):
            continue
        if k not in _TRAIN_KEYS:
            raise UsageError(f"unknown config key {k!r}")
        typ = _TRAIN_KEYS[k]
        try:
            if typ is bool or typ == "bool":
                kwargs[k] = v.lower() in ("1", "true", "yes", "on")
            elif typ is int or typ == "int":
                kwargs[k] = int(v)
            elif typ is float or typ == "float":
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        except ValueError:
            raise UsageError(f"config key {k!r}: cannot parse value {v!r}") from None
    try:
        return training.TrainConfig(**kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _model_from_cfg(cfg, seed, precision="f32"):
    kind = cfg.get("model", "default")
    if kind == "default":
        config = default_config(precision)
    elif kind == "tiny":
        config = tiny_config(precision)
    else:
        raise UsageError(f"unknown model kind {kind!r}")
    if "q" in cfg:
        config = config.with_q(int(cfg["q"]))
    return init_weights(build_model(config), seed)


def _load_samples(annotations_path, images_dir, errors):
    anns = groundtruth.parse_annotations(annotations_path)
    samples = []
    for ann in anns:
        img_path = Path(images_dir) / ann.image_id
        try:
            raw = groundtruth.load_image(img_path)
            groundtruth.validate_points(
                ann, raw.shape[3], raw.shape[2], str(annotations_path)
            )
        except DataError as e:
            errors.append(str(e))
            continue
        samples.append((ann, raw))
    return samples


def _heat_pgm(dmap):
    peak = float(dmap.max())
    if peak <= 0:
        return np.zeros(dmap.shape, np.uint8)
    return np.clip(255.0 * dmap / peak, 0, 255).astype(np.uint8)


# ---- commands ----


def cmd_make_gt(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    sigma = args.sigma if args.sigma is not None else float(cfg.get("sigma", 7.0))
    manifest = Manifest("make-gt", {"sigma": sigma}, args.seed,
                        [args.annotations, args.images])
    errors = []
    samples = _load_samples(args.annotations, args.images, errors)
    for ann, raw in samples:
        h, w = raw.shape[2], raw.shape[3]
        dmap = groundtruth.generate_density_map(ann, h, w, sigma)
        out_path = out_dir / (Path(ann.image_id).stem + ".dmap")
        groundtruth.write_dmap(dmap, out_path)
        manifest.add_output(out_path)
        print(f"{ann.image_id} N={ann.count} sum={float(dmap.sum()):.4f}")
    manifest.write(out_dir)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    tc = build_train_config(cfg, args.seed)
    manifest = Manifest("train", {**dataclasses.asdict(tc), **cfg}, args.seed,
                        [args.annotations, args.images])
    errors = []
    raw_samples = _load_samples(args.annotations, args.images, errors)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    samples = [
        training.Sample(groundtruth.normalize_image(raw), ann)
        for ann, raw in raw_samples
    ]
    model = _model_from_cfg(cfg, args.seed, tc.precision)
    model, rows = train_with_log(model, samples, tc, out_dir,
                                 deterministic=args.threads == 1)
    for stem in ("best", "last"):
        for ext in (".sonn", ".json"):
            p = out_dir / f"{stem}{ext}"
            if p.exists():
                manifest.add_output(p)
    manifest.add_output(out_dir / "log.csv")
    manifest.write(out_dir)
    return EXIT_OK


def train_with_log(model, samples, tc, out_dir, deterministic=True):
    def log(row):
        print(
            f"epoch {row['epoch']}: train_loss={row['train_loss']:.6g} "
            f"val_mae={row['val_mae']:.4f} ({row['seconds']:.1f}s)"
        )

    return training.train(
        model, samples, tc, out_dir=out_dir, log=log, deterministic_log=deterministic
    )


def cmd_evaluate(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    sigma = args.sigma if args.sigma is not None else float(cfg.get("sigma", 7.0))
    grid = int(cfg.get("grid", 4))
    model = serialize.load_model(args.model)
    manifest = Manifest("evaluate", {"sigma": sigma, "grid": grid}, args.seed,
                        [args.model, args.annotations, args.images])
    errors = []
    raw_samples = _load_samples(args.annotations, args.images, errors)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    if not raw_samples:
        raise DataError("no usable images in the dataset")
    triples = []
    bench_shape = None
    for ann, raw in raw_samples:
        if raw.shape[1] != model.config.in_channels:
            raise DataError(
                f"{ann.image_id}: image has {raw.shape[1]} channels, "
                f"model expects {model.config.in_channels}"
            )
        x = groundtruth.normalize_image(raw)
        pred = model.forward(x)[0, 0]
        full = groundtruth.generate_density_map(ann, raw.shape[2], raw.shape[3], sigma)
        gt = groundtruth.downsample_gt(full, 4)
        triples.append((pred, gt, ann.count))
        bench_shape = (1, raw.shape[1], raw.shape[2], raw.shape[3])
    report = metrics.evaluate(
        model, triples,
        dataset_id=str(args.annotations), model_id=str(args.model),
        grid=grid, bench_shape=bench_shape,
    )
    report_path = out_dir / "report.json"
    report_path.write_text(report.to_json())
    report.append_csv(out_dir / "results.csv")
    manifest.add_output(report_path)
    manifest.add_output(out_dir / "results.csv")
    manifest.write(out_dir)
    print(report.to_json())
    return EXIT_OK


def cmd_predict(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = serialize.load_model(args.model)
    manifest = Manifest("predict", {}, args.seed, [args.model, args.image])
    raw = groundtruth.load_image(args.image)
    if raw.shape[1] != model.config.in_channels:
        raise DataError(
            f"{args.image}: image has {raw.shape[1]} channels, "
            f"model expects {model.config.in_channels}"
        )
    pred = model.forward(groundtruth.normalize_image(raw))[0, 0]
    stem = Path(args.image).stem
    dmap_path = out_dir / f"{stem}.dmap"
    pgm_path = out_dir / f"{stem}_heat.pgm"
    groundtruth.write_dmap(pred, dmap_path)
    groundtruth.write_pgm(_heat_pgm(pred), pgm_path)
    manifest.add_output(dmap_path)
    manifest.add_output(pgm_path)
    manifest.write(out_dir)
    print(f"{float(pred.sum()):.2f}")
    return EXIT_OK


def cmd_benchmark(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    if args.model:
        model = serialize.load_model(args.model)
    else:
        model = _model_from_cfg(cfg, args.seed)
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
        if len(shape) != 4:
            raise ValueError
    except ValueError:
        raise UsageError(f"--shape expects N,C,H,W, got {args.shape!r}") from None
    manifest = Manifest("benchmark", {"shape": list(shape), **cfg}, args.seed,
                        [args.model] if args.model else [])
    bench = metrics.benchmark(model, shape, seed=args.seed)
    size, gmacs = metrics.model_footprint(model, shape[2], shape[3])
    result = {**bench, "model_size_bytes": size, "gmacs": gmacs}
    out_path = out_dir / "benchmark.json"
    out_path.write_text(json.dumps(result, indent=2))
    manifest.add_output(out_path)
    manifest.write(out_dir)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_gradcheck(args):
    out_dir = Path(args.out) if args.out else None
    variants = {
        "q1": tiny_config(q_first=1, q_rest=1),
        "q3_q5": tiny_config(q_first=3, q_rest=5),
    }
    results = {}
    ok = True
    for name, config in variants.items():
        model = init_weights(build_model(config), args.seed)
        report = training.gradient_check(model, seed=args.seed)
        results[name] = report
        status = "pass" if report["passed"] else "FAIL"
        print(f"{name}: max_rel_err={report['max_relative_error']:.3e} {status}")
        ok = ok and report["passed"]
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = Manifest("gradcheck", {}, args.seed, [])
        out_path = out_dir / "gradcheck.json"
        out_path.write_text(json.dumps(results, indent=2))
        manifest.add_output(out_path)
        manifest.write(out_dir)
    return EXIT_OK if ok else EXIT_GRADCHECK


def make_parser():
    parser = _Parser(prog="crowdcount", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable, last wins)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("make-gt", help="dot annotations -> density-map files")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="eight-metric evaluation report")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict count + density map for one image")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="inference timing / footprint")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--shape", default="1,3,512,640", metavar="N,C,H,W")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _set_threads(n):
    # kernels are single-threaded unless numba parallel layers are in
    # play; importing numba lazily keeps startup quiet and fast
    if n and n > 1:
        try:
            import numba

            numba.set_num_threads(n)
        except (ImportError, ValueError):
            pass


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
