"""Command-line entry point: ``cva {synth,pretrain,probe,rank,gradcheck,config}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import (
    AugmentationError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    InputError,
    LoadError,
    NumericalError,
    ParseError,
    SamplingError,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MANIFEST = "manifest.json"

log = logging.getLogger("cva")


class UsageError(Exception):
    """Flag combination that argparse cannot express."""


def _dims(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected d,h,w integers, got {text!r}") from None
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return parts


# -- synth -------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .rng import keyed_rng
    from .volume import SynthSpec, save_raw, synth_generate

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        vseed = int(keyed_rng(args.seed, "synth-volume", i).integers(2**31))
        spec = SynthSpec(seed=vseed, dims=args.dims, label_classes=args.classes)
        spec.validate()
        img, lab = synth_generate(spec)
        save_raw(out / f"vol_{i:03d}", img)
        save_raw(out / f"lab_{i:03d}", lab)
        entries.append({"image": f"vol_{i:03d}", "labels": f"lab_{i:03d}", "seed": vseed})
    manifest = {"seed": args.seed, "dims": list(args.dims), "classes": args.classes, "volumes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {args.count} volume/label pairs to {out}")
    return EXIT_OK


def _read_manifest(data_dir) -> tuple[Path, dict]:
    d = Path(data_dir)
    try:
        return d, json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"no {MANIFEST} in {d}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{d / MANIFEST}: {e}") from None


def load_dataset(data_dir, labels: bool = False):
    from .volume import load_raw

    d, manifest = _read_manifest(data_dir)
    vols = manifest.get("volumes", [])
    if not vols:
        raise DataError(f"{d}: manifest lists no volumes")
    if labels:
        return [(load_raw(d / v["image"]), load_raw(d / v["labels"])) for v in vols], manifest
    return [load_raw(d / v["image"]) for v in vols], manifest


# -- pretrain ----------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .config import load_run_config
    from .train import init_state, load_checkpoint, train_loop

    if args.stage == "two" and not (args.warm_start or args.from_scratch):
        raise UsageError("--stage two needs --warm-start CKPT or --from-scratch")
    if args.warm_start and args.from_scratch:
        raise UsageError("--warm-start and --from-scratch are mutually exclusive")
    cfg = load_run_config(args.config)
    data = args.data or cfg.paths.data
    out = Path(args.out or cfg.paths.out)
    vols, _ = load_dataset(data)
    state = None
    if args.warm_start:
        student, _, _ = load_checkpoint(args.warm_start, cfg.encoder, cfg.train.dtype)
        # the new stage starts its teacher from the warm-start student
        state = init_state(cfg.encoder, cfg.train, params=student)
    result = train_loop(vols, cfg.encoder, cfg.sampler, cfg.train, stage=args.stage, state=state,
                        out_dir=out, aug=cfg.augment)
    last = result.trace[-1]["total"] if result.trace else float("nan")
    print(f"stage {args.stage}: {len(result.trace)} steps, final total {last:.6g}, checkpoint {result.checkpoints[0]}")
    return EXIT_OK


# -- probe -------------------------------------------------------------------------------

def cmd_probe(args) -> int:
    from .config import load_run_config
    from .nets import EncoderConfig
    from .train import load_checkpoint, seg_probe

    ckpt = Path(args.ckpt)
    if not ckpt.with_suffix(".json").exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, _, meta = load_checkpoint(ckpt)
    enc = EncoderConfig(**meta["encoder"]) if "encoder" in meta else load_run_config(args.config).encoder
    student, teacher, _ = load_checkpoint(ckpt, enc)
    params = teacher if args.branch == "teacher" else student
    pairs, manifest = load_dataset(args.data, labels=True)
    if len(pairs) < 2:
        raise DataError("probe needs at least two labelled volumes (train and test)")
    n_train = max(1, int(round(len(pairs) * args.train_fraction)))
    n_train = min(n_train, len(pairs) - 1)
    classes = int(manifest.get("classes", 1))
    report = seg_probe(params, enc, pairs[:n_train], pairs[n_train:], classes, args.epochs, args.lr, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "dsc"])
        w.writerows(report.rows())
    print(f"mean DSC {report.mean_dsc:.4f} -> {out}")
    return EXIT_OK


# -- rank --------------------------------------------------------------------------------

def cmd_rank(args) -> int:
    from .ranking import SCHEMES, fixture_path, load_metrics_csv, rank_report_write

    src = args.inp
    path = fixture_path(src.split(":", 1)[1]) if src.startswith("fixture:") else Path(src)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {src}")
    table = load_metrics_csv(path)
    report = SCHEMES[args.scheme](table)
    rank_report_write(report, args.out)
    for name in report.order():
        r = report.row(name)
        print(f"{name:28s} avg {r['avg']:.2f}  seg {r['seg']:.2f}  cls {r['cls']:.2f}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .checks import TARGETS, check_target

    names = list(TARGETS) if args.target == "all" else [args.target]
    ok = True
    for name in names:
        reports = check_target(name, args.instances, args.seed, tolerance=1e-3)
        passed = all(r.passed for r in reports)
        ok &= passed
        worst = max(r.worst for r in reports)
        print(f"{'PASS' if passed else 'FAIL'} {name:20s} instances={len(reports)} max_rel_err={worst:.2e}")
        for r in reports:
            if not r.passed:
                print(f"    {r.summary()}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- config ------------------------------------------------------------------------------

def cmd_config(args) -> int:
    from .config import RunConfig, load_run_config, schema

    if args.schema:
        text = json.dumps(schema(), indent=2) + "\n"
    elif args.check:
        cfg = load_run_config(args.check)
        text = json.dumps(cfg.to_dict(), indent=2) + "\n"
    else:
        text = json.dumps(RunConfig().to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .checks import TARGETS

    p = argparse.ArgumentParser(prog="cva", description="Overlap-aligned self-supervised pretraining toolkit (toy scale).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic blob volumes with labels",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=4, help="number of volume/label pairs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=_dims, default=(48, 48, 48), help="volume extents d,h,w")
    s.add_argument("--classes", type=int, default=2, help="number of foreground classes")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="run one pretraining stage",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--config", required=True, help="run config JSON (see `config --schema`)")
    s.add_argument("--stage", choices=("one", "two"), default="one",
                   help="one: reconstruction only; two: full objective")
    s.add_argument("--warm-start", help="checkpoint to initialise from")
    s.add_argument("--from-scratch", action="store_true", help="allow stage two without a warm start")
    s.add_argument("--data", help="dataset directory (overrides paths.data)")
    s.add_argument("--out", help="output directory (overrides paths.out)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear segmentation probe on frozen features",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--ckpt", required=True, help="checkpoint stem or .json path")
    s.add_argument("--data", required=True, help="labelled dataset directory")
    s.add_argument("--out", default="probe.csv", help="per-class DSC report")
    s.add_argument("--config", help="run config, only needed if the checkpoint lacks encoder metadata")
    s.add_argument("--branch", choices=("student", "teacher"), default="student")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--train-fraction", type=float, default=0.67)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("rank", help="aggregate metric tables into ranks",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--scheme", choices=("raw", "range"), default="raw")
    s.add_argument("--in", dest="inp", required=True,
                   help="metrics CSV, or fixture:NAME for an embedded table (e.g. fixture:raw_resenc_l)")
    s.add_argument("--out", required=True, help="report CSV")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--target", choices=["all", *TARGETS], default="all")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("config", help="print the default config, validate one, or emit the schema")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--schema", action="store_true", help="emit the JSON schema")
    g.add_argument("--check", metavar="RUN_JSON", help="validate a config and print it with defaults filled in")
    s.add_argument("--out", help="write to a file instead of stdout")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SamplingError, InputError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, AugmentationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, LoadError, FormatError, ParseError, DataError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
