"""``segunet`` command line: train / eval / predict / synth / sweep.

Exit codes: 0 ok, 2 config error, 3 data error, 4 non-finite loss, 5 checkpoint
cannot be loaded. Failures print one line to stderr::

    segunet-error code=3 kind=data message="missing directory: /x/masks"
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from PIL import Image

from . import config as C
from . import metrics as M
from .data import FolderDataset, SyntheticShapesConfig, discover_datasets, generate_synthetic, load_image
from .engine import ablation_sweep, evaluate, predict_probability, sweep_csv, sweep_markdown, to_uint8, train
from .errors import CheckpointError, ConfigError, DataError, TrainingDivergedError
from .model import build_model, load_checkpoint

log = logging.getLogger("segunet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail(EXIT_CONFIG, "config", message)
        sys.exit(EXIT_CONFIG)


def _fail(code, kind, message):
    print(f"segunet-error code={code} kind={kind} message={json.dumps(str(message))}", file=sys.stderr)
    return code


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_manifest(out_dir: Path, args, resolved, artifacts, **extra):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": resolved,
        "seed": resolved.get("seed") if resolved else None,
        "started": _now(),
        "artifacts": artifacts,
        **extra,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path, manifest


def _finish_manifest(path, manifest, status):
    manifest["finished"] = _now()
    manifest["status"] = status
    path.write_text(json.dumps(manifest, indent=2, default=str))


def _train_overrides(args):
    ov = {
        "model.preset": getattr(args, "preset", None),
        "train.lr": args.lr,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.max_steps": args.max_steps,
        "data.image_size": args.image_size,
        "data.multiscale": args.multiscale,
        "model.adapter.bottleneck_dim": args.bottleneck,
        "seed": args.seed,
    }
    if args.no_freeze:
        ov["model.freeze_backbone"] = False
    for item in args.set or []:
        k, v = C.parse_override(item)
        ov[k] = v
    return ov


def cmd_train(args):
    resolved = C.resolve(args.config, _train_overrides(args))
    model_cfg, train_cfg = C.model_config(resolved), C.train_config(resolved)
    out = Path(args.out)
    artifacts = {k: str(out / k) for k in ("log.csv", "metrics.csv", "config.snapshot", "final.sunet")}
    mpath, manifest = _write_manifest(out, args, resolved, artifacts, data=str(args.data))
    C.snapshot(resolved, out / "config.snapshot")
    specs = discover_datasets(args.data, train_cfg.image_size)
    if len(specs) != 1:
        raise DataError(f"--data must point at a single images/+masks/ folder, found {len(specs)}")
    dataset = FolderDataset(specs[0])
    model = build_model(model_cfg)
    try:
        rec = train(model, dataset, train_cfg, out_dir=out)
    except TrainingDivergedError:
        _finish_manifest(mpath, manifest, "diverged")
        raise
    _finish_manifest(mpath, manifest, "ok")
    print(f"trained {len(rec.steps)} steps, final loss {rec.steps[-1]['total']:.4f}, checkpoint {rec.checkpoint}")
    return EXIT_OK


def _load(path):
    try:
        model, header, _ = load_checkpoint(path, return_header=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    size = (header.get("training_state") or {}).get("image_size", 352)
    return model, size


def cmd_eval(args):
    model, size = _load(args.checkpoint)
    size = args.image_size or size
    reports = []
    for spec in discover_datasets(args.data, size):
        reports.append(evaluate(model, FolderDataset(spec), image_size=size, name=spec.name))
    out = Path(args.out)
    M.write_csv(reports, out)
    out.with_suffix(".md").write_text(M.markdown_table(reports, columns=M.CSV_COLUMNS[2:]) + "\n")
    print(M.markdown_table(reports, columns=M.CSV_COLUMNS[2:]))
    return EXIT_OK


def _image_inputs(path: Path):
    if path.is_dir():
        files = sorted(f for f in path.iterdir() if f.suffix.lower() in M.IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no images in {path}", items=[str(path)])
        return files
    if not path.exists():
        raise DataError(f"no such image: {path}", items=[str(path)])
    return [path]


def cmd_predict(args):
    model, size = _load(args.checkpoint)
    size = args.image_size or size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = []
    for f in _image_inputs(Path(args.image)):
        try:
            image = load_image(f)
        except DataError:
            failed.append(str(f))
            continue
        prob = predict_probability(model, image, size)
        Image.fromarray(to_uint8(prob), "L").save(out / f"{f.stem}.png")
    if failed:
        raise DataError(f"unreadable images: {', '.join(failed)}", items=failed)
    return EXIT_OK


def cmd_synth(args):
    cfg = SyntheticShapesConfig(
        n_samples=args.n, canvas=args.canvas, contrast=args.contrast, noise_std=args.noise_std, seed=args.seed
    )
    spec = generate_synthetic(cfg, args.out)
    print(f"wrote {cfg.n_samples} samples to {spec.root}")
    return EXIT_OK


def cmd_sweep(args):
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    overrides = _train_overrides(args)
    resolved = C.resolve(args.config, overrides)
    out = Path(args.out)
    mpath, manifest = _write_manifest(
        out, args, resolved, {"table": str(out / "sweep.md"), "csv": str(out / "sweep.csv")}, presets=presets
    )
    train_spec = discover_datasets(args.data, resolved["data.image_size"])
    if len(train_spec) != 1:
        raise DataError("--data must point at a single images/+masks/ folder")
    dataset = FolderDataset(train_spec[0])
    eval_sets = None
    if args.eval_data:
        eval_sets = {s.name: FolderDataset(s) for s in discover_datasets(args.eval_data, resolved["data.image_size"])}
    rows = []
    for seed in seeds or [resolved["seed"]]:
        r = dict(resolved, seed=seed)
        rows += ablation_sweep(
            presets, dataset, C.train_config(r), C.model_config(r), eval_datasets=eval_sets, out_dir=out / f"seed{seed}"
        )
    table = sweep_markdown(rows, show_seed=bool(seeds))
    (out / "sweep.md").write_text(table + "\n")
    sweep_csv(rows, out / "sweep.csv")
    _finish_manifest(mpath, manifest, "ok" if not any(r.error for r in rows) else "partial")
    print(table)
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config", help="YAML config with (dotted or nested) keys")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--multiscale", help="comma separated scales, e.g. 1,1.25")
    p.add_argument("--bottleneck", type=int, help="adapter bottleneck width")
    p.add_argument("--no-freeze", action="store_true", help="fine-tune the whole encoder")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")


def build_parser():
    parser = _Parser(prog="segunet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on an images/+masks/ folder")
    _add_train_flags(p)
    p.add_argument("--preset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one or more datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset folder or a folder of datasets")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export 8-bit probability masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic shapes corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--noise-std", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="backbone ablation: train + eval each preset")
    _add_train_flags(p)
    p.add_argument("--presets", required=True, help="comma separated, e.g. desktiny,desk")
    p.add_argument("--seeds", help="comma separated seeds; one sweep per seed")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="evaluate here instead of on the training folder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except DataError as e:
        return _fail(EXIT_DATA, "data", e)
    except TrainingDivergedError as e:
        return _fail(EXIT_NAN, "nan", e)
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, "checkpoint", e)


if __name__ == "__main__":
    sys.exit(main())
