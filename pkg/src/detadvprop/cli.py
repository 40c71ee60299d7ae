"""Command-line entry point: gen-data, train, corrupt, eval, report and attack-dump.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
errors. Every command that writes output also writes a ``manifest.json``
recording its configuration, seeds and paths.
"""

import argparse
import dataclasses
import os
import sys

from . import __version__
from .config import (VARIANTS, AttackConfig, ConfigError, load_train_config, parse_flat, parse_value, to_flat,
                     train_config_from_dict)
from .data.corruptions import CORRUPTION_KINDS, SEVERITIES, CorruptionGrid, build_corruption_grid
from .data.dataset import DetectionDataset, canonical_json, generate_dataset, save_png, write_json
from .data.scenes import SceneSpec
from .evaluation import EvalReport, evaluate_grid

MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _set_threads():
    value = os.environ.get("DET_ADVPROP_THREADS")
    if value:
        import torch

        try:
            threads = int(value)
        except ValueError:
            raise UsageError(f"DET_ADVPROP_THREADS must be a positive integer, got {value!r}") from None
        if threads < 1:
            raise UsageError(f"DET_ADVPROP_THREADS must be a positive integer, got {value!r}")
        torch.set_num_threads(threads)


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _write_manifest(directory, command, config, paths, seeds, extra=None, name=MANIFEST_NAME):
    """Record a command's inputs and outputs; every referenced path must exist."""
    missing = [p for p in paths.values() if p is not None and not os.path.exists(p)]
    if missing:
        raise RuntimeError(f"manifest references missing paths: {missing}")
    manifest = {
        "command": command,
        "config": config,
        "paths": {k: os.path.abspath(v) if v is not None else None for k, v in paths.items()},
        "seeds": seeds,
        "version": __version__,
    }
    manifest.update(extra or {})
    write_json(os.path.join(directory, name), manifest)


def _flat_json(config):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in to_flat(config).items()}


def cmd_gen_data(args):
    values = {}
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            values = parse_flat(fh.read())
    values.update(_overrides(args.set))
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown scene keys {unknown}")
    try:
        spec = SceneSpec(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    generate_dataset(spec, args.n, args.seed, args.out, args.val_fraction, args.overwrite)
    scene = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(spec).items()}
    _write_manifest(args.out, "gen-data", {"scene": scene, "n": args.n, "val_fraction": args.val_fraction},
                    {"dataset": args.out}, {"root": args.seed})
    print(f"wrote {args.n} images to {args.out}")


def _train_config(args):
    overrides = _overrides(args.set)
    for flag, key in (("variant", "train.variant"), ("epochs", "train.epochs"), ("batch_size", "train.batch_size"),
                      ("base_lr", "train.base_lr"), ("seed", "train.seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        return load_train_config(args.config, overrides)
    return train_config_from_dict(overrides)


def cmd_train(args):
    from .trainer import train

    config = _train_config(args)
    dataset = DetectionDataset(args.data)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.overwrite:
        raise FileExistsError(f"output directory {args.out} is not empty (pass --overwrite)")
    final, log = train(config, dataset, args.out, split=args.split,
                       log=None if args.quiet else lambda msg: print(msg, flush=True))
    _write_manifest(args.out, "train", _flat_json(config),
                    {"dataset": args.data, "checkpoint": final, "last": os.path.join(args.out, "last"),
                     "train_log": os.path.join(args.out, "train_log.jsonl")},
                    {"root": config.seed})
    print(f"final checkpoint: {final}")


def _csv(text, cast=str):
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def cmd_corrupt(args):
    kinds = _csv(args.kinds) if args.kinds else list(CORRUPTION_KINDS)
    try:
        severities = _csv(args.severities, int) if args.severities else list(SEVERITIES)
    except ValueError:
        raise UsageError(f"--severities expects integers, got {args.severities!r}") from None
    bad = [k for k in kinds if k not in CORRUPTION_KINDS] + [str(s) for s in severities if s not in SEVERITIES]
    if bad:
        raise UsageError(f"unsupported corruption kinds or severities: {bad}")
    dataset = DetectionDataset(args.data)
    grid = build_corruption_grid(dataset, kinds, severities, args.seed, args.out, args.split, args.overwrite)
    print(f"wrote {len(grid)} corrupted variants to {args.out}")


def cmd_eval(args):
    from .inference import evaluate_model
    from .trainer import load_checkpoint

    state, _ = load_checkpoint(args.ckpt)
    dataset = DetectionDataset(args.data)
    kwargs = {"score_thr": args.score_thr, "nms_iou": args.nms_iou}
    images, annotations, _ = dataset.load(args.split)
    report = evaluate_model(state, images, annotations, dataset.classes, args.max_dets, **kwargs)
    if args.grid:
        grid = CorruptionGrid(args.grid)
        maps = {}
        for kind, severity, variant in grid.variants():
            v_images, v_anns, _ = variant.load(grid.manifest.get("split", args.split))
            maps[(kind, severity)] = evaluate_model(state, v_images, v_anns, dataset.classes, args.max_dets,
                                                    **kwargs)
        report = evaluate_grid(maps, report, expected=grid.keys)
    text = report.to_json()
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _write_manifest(out_dir, "eval",
                        {"split": args.split, "max_dets": args.max_dets, "score_thr": args.score_thr,
                         "nms_iou": args.nms_iou},
                        {"checkpoint": args.ckpt, "dataset": args.data, "grid": args.grid, "report": args.out},
                        {}, name=os.path.basename(args.out) + ".manifest.json")
    else:
        sys.stdout.write(text)


def cmd_report(args):
    from .reporting import compare_report, render_table

    reports = [EvalReport.load(p) for p in args.reports]
    names = _csv(args.names) if args.names else [os.path.splitext(os.path.basename(p))[0] for p in args.reports]
    if len(names) != len(reports):
        raise UsageError("--names needs one name per report")
    if len(reports) == 1:
        sys.stdout.write(render_table(reports, names))
        table = None
    else:
        if not 0 <= args.baseline < len(reports):
            raise UsageError(f"--baseline must index one of the {len(reports)} reports")
        text, table = compare_report(reports, args.baseline, names)
        sys.stdout.write(text)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(table if table is not None else
                                    {"rows": [{"model": n, "values": dataclasses.asdict(r)}
                                              for n, r in zip(names, reports)]}))


def cmd_attack_dump(args):
    from .attacks import generate_adversarial
    from .trainer import batch_targets, load_checkpoint

    values = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            values = {k: v for k, v in parse_flat(fh.read()).items() if k.startswith("attack.")}
    values.update(_overrides(args.set))
    unknown = [k for k in values if not k.startswith("attack.")]
    if unknown:
        raise UsageError(f"attack-dump only takes attack.* keys, got {unknown}")
    try:
        cfg = AttackConfig(**{k.split(".", 1)[1]: v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    state, _ = load_checkpoint(args.ckpt)
    branch = args.branch if args.branch is not None else min(1, state.num_branches - 1)
    images, annotations, ids = DetectionDataset(args.data).load(args.split)
    images, annotations, ids = images[: args.n], annotations[: args.n], ids[: args.n]
    if not ids:
        raise ValueError(f"split {args.split!r} is empty")
    targets = batch_targets(state, images, annotations)
    adv = generate_adversarial(images, targets, cfg, state, branch, args.seed, annotations)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    entries = []
    for image_id, original, perturbed, tag in zip(ids, images, adv.images, adv.source_tags):
        name = f"images/{int(image_id):06d}.png"
        save_png(os.path.join(args.out, name), perturbed.numpy())
        linf = float((perturbed - original).abs().max())
        entries.append({"id": image_id, "file": name, "source_tag": tag, "linf": linf, "linf_255": linf * 127.5})
    attack_cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}
    _write_manifest(args.out, "attack-dump", {"attack": attack_cfg, "branch": branch, "split": args.split},
                    {"checkpoint": args.ckpt, "dataset": args.data}, {"root": args.seed},
                    {"images": entries, "linf": max(e["linf"] for e in entries)})
    print(f"wrote {len(entries)} adversarial images to {args.out}")


def build_parser():
    parser = _Parser(prog="det-advprop", description="Adversarially augmented detector training toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic detection dataset")
    p.add_argument("--spec", help="flat key = value scene description")
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scene key")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("corrupt", help="build a corrupted copy of the validation split")
    p.add_argument("--data", required=True)
    p.add_argument("--kinds", help=f"comma-separated subset of {','.join(CORRUPTION_KINDS)}")
    p.add_argument("--severities", help="comma-separated subset of 1..5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally on a corruption grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid")
    p.add_argument("--split", default="val")
    p.add_argument("--max-dets", type=int, default=100)
    p.add_argument("--score-thr", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out", help="report path (default: print to stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate reports, with deltas against a baseline")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", help="comma-separated row names")
    p.add_argument("--baseline", type=int, default=0)
    p.add_argument("--json", help="also write the delta table as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("attack-dump", help="write adversarial images and their manifest")
    p.add_argument("--ckpt", required=True, help="checkpoint with the auxiliary branch (e.g. last/)")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="run configuration; only attack.* keys are used")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--branch", type=int)
    p.add_argument("--split", default="val")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help and --version exit 0
        return exc.code if isinstance(exc.code, int) else 1
    try:
        _set_threads()
        args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"det-advprop: error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failure: report it without a traceback
        sys.stderr.write(f"det-advprop: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
