"""Command-line interface.

Verbs: gen-model, fisher, allocate, decompose, rotate, quantize, run,
pipeline, report. Exit codes: 0 success, 1 validation error, 2 numerical
failure, 3 golden mismatch.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

from .accounting import (
    check_table2,
    fmt_fixed,
    kv_cache_bytes,
    recon_macs,
    render_table2,
    total_memory_breakdown,
    weight_ratio,
)
from .config import load_config
from .decompose import Granularity
from .errors import GoldenMismatchError, NumericalError, PaluError, ValidationError
from .pipeline import (
    FACTORS_FILE,
    _fmt_err,
    FISHER_FILE,
    MODEL_FILE,
    PLAN_FILE,
    ROTATED_FILE,
    allocate_stage,
    decompose_stage,
    fisher_stage,
    gen_model,
    preset_for,
    quantize_stage,
    rotate_stage,
    run_pipeline,
    run_stage,
)
from .ranks import plan_from_json, plan_report, scores_from_json
from .tables import render_text


def _add_global_flags(p: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps a subcommand's unset flags from clobbering values
    # given before the command name; real defaults live on the top level
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--out", type=str, default=argparse.SUPPRESS, help="override the config out_dir")
    p.add_argument("--golden", type=str, default=argparse.SUPPRESS,
                   help="golden table to verify (report/pipeline)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palu",
        description="Latent KV-cache compression: decompose, allocate, rotate, quantize, decode, report.",
    )
    parser.set_defaults(config=None, seed=None, out=None, golden=None)
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {}
    for name, help_text in [
        ("gen-model", "write a synthetic model container"),
        ("fisher", "estimate per-target Fisher scores"),
        ("allocate", "turn Fisher scores into a rank plan"),
        ("decompose", "factor K/V projections per the rank plan"),
        ("rotate", "fuse Hadamard rotations into the factors"),
        ("quantize", "quantize 2-D tensors of a container"),
        ("run", "decode a seeded stream through reference and latent paths"),
        ("pipeline", "run every stage end to end"),
        ("report", "accounting tables and golden checks"),
    ]:
        commands[name] = sub.add_parser(name, help=help_text)
        _add_global_flags(commands[name])

    commands["quantize"].add_argument(
        "--input", type=Path, help="container to quantize (default: factors)"
    )
    commands["run"].add_argument(
        "--factors", type=Path, help="factors container (default per config)"
    )
    p_rep = commands["report"]
    p_rep.add_argument("--weight-ratio", nargs=3, type=float, metavar=("M", "N", "R"),
                       help="print (m*r + r*n)/(m*n); R may be fractional")
    p_rep.add_argument("--recon-macs", action="store_true",
                       help="print the per-head reconstruction cost table")
    p_rep.add_argument("--csv", action="store_true", help="emit CSV instead of aligned text")
    return parser


def _recon_macs_table() -> str:
    n, dh, r = 4, 8, 4
    rows = []
    for label, gran, rank in [
        ("multi-head", Granularity.multi_head(), r),
        ("group-head s=2", Granularity.group_head(2), 2 * r),
        ("joint-head", Granularity.joint_head(n), n * r),
    ]:
        macs = recon_macs(gran, rank, dh, n)
        rows.append(
            [label, str(rank), str(macs.per_head_max), str(macs.total),
             f"{macs.per_head_max // (r * dh)}x"]
        )
    title = f"reconstruction MACs per step, n={n} heads, head_dim={dh}, equal latent width\n"
    return title + render_text(["scheme", "rank/group", "per-head", "total", "vs multi-head"], rows)


def _cmd_report(args) -> int:
    if args.weight_ratio:
        m, n, r = args.weight_ratio
        print(fmt_fixed(weight_ratio(m, n, r), 4))
        return 0
    if args.recon_macs:
        print(_recon_macs_table(), end="")
        return 0
    if args.golden == "table2":
        checks = check_table2()
        print(render_table2(checks, csv=args.csv), end="")
        if not all(c.ok for c in checks):
            raise GoldenMismatchError("table2 golden rows do not match")
        return 0
    if args.golden:
        raise ValidationError(f"unknown golden table {args.golden!r}")
    if args.config:
        cfg = load_config(args.config, args.seed, args.out)
        preset = preset_for(cfg)
        # config budget_rate is the kept latent fraction; accounting wants
        # the uniform compression rate
        compression = float(1 - Fraction(str(cfg.budget_rate)))
        rep = kv_cache_bytes(preset, 128 * 1024, compression or None, cfg.bits)
        print(
            f"{preset.name}: 128K-token kv cache "
            f"{fmt_fixed(rep.kv_gb_baseline, 1)} GB baseline, "
            f"{fmt_fixed(rep.kv_gb_compressed, 1)} GB compressed "
            f"(rate {fmt_fixed(rep.compression_rate * 100, 2)}%)"
        )
        print()
        print(total_memory_breakdown(preset, 128 * 1024, compression or None, cfg.bits,
                                     rope=cfg.rope, group_size=cfg.group_size).render(), end="")
        return 0
    print(render_table2(csv=args.csv), end="")
    return 0


def _dispatch(args) -> int:
    if args.command == "report":
        return _cmd_report(args)

    cfg = load_config(_require_config(args), args.seed, args.out)
    out = Path(cfg.out_dir)

    if args.command == "gen-model":
        path, text = gen_model(cfg)
        print(text, end="")
        print(f"wrote {path}")
        return 0
    if args.command == "fisher":
        path, scores = fisher_stage(cfg, out / MODEL_FILE)
        print(f"wrote {path} ({len(scores)} targets)")
        return 0
    if args.command == "allocate":
        scores = scores_from_json((out / FISHER_FILE).read_text("utf-8"))
        spec = cfg.require_synthetic()
        path, plan = allocate_stage(cfg, scores, spec)
        print(plan_report(plan).render(), end="")
        print(f"wrote {path}")
        return 0
    if args.command == "decompose":
        plan = plan_from_json((out / PLAN_FILE).read_text("utf-8"))
        path = decompose_stage(cfg, out / MODEL_FILE, plan)
        print(f"wrote {path}")
        return 0
    if args.command == "rotate":
        path = rotate_stage(cfg, out / FACTORS_FILE)
        print(f"wrote {path}")
        return 0
    if args.command == "quantize":
        source = args.input or (out / (ROTATED_FILE if cfg.hadamard else FACTORS_FILE))
        path = quantize_stage(cfg, source)
        print(f"wrote {path}")
        return 0
    if args.command == "run":
        factors = args.factors or (out / (ROTATED_FILE if cfg.hadamard else FACTORS_FILE))
        plan = None
        plan_file = out / PLAN_FILE
        if plan_file.exists():
            plan = plan_from_json(plan_file.read_text("utf-8"))
        path, report = run_stage(cfg, out / MODEL_FILE, factors, plan)
        print(f"max rel err:  {_fmt_err(report['max_rel_err'])}")
        print(f"mean rel err: {_fmt_err(report['mean_rel_err'])}")
        print(f"wrote {path}")
        return 0
    if args.command == "pipeline":
        if args.golden and args.golden != "table2":
            raise ValidationError(f"unknown golden table {args.golden!r}")
        report = run_pipeline(cfg)
        print(f"max rel err:  {_fmt_err(report['max_rel_err'])}")
        print(f"mean rel err: {_fmt_err(report['mean_rel_err'])}")
        print(f"reports under {cfg.out_dir}")
        return 0
    raise ValidationError(f"unknown command {args.command!r}")


def _require_config(args) -> Path:
    if not args.config:
        raise ValidationError("this command requires --config PATH")
    return args.config


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except GoldenMismatchError as exc:
        print(f"golden mismatch: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PaluError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
