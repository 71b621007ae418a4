"""Command-line pipeline: hadamard, quantize, dequantize, analyze, toy-eval, report.

Exit codes: 0 success, 1 usage/argument errors, 2 data/format errors.
Every run echoes its resolved configuration to stderr.  The CSRT_THREADS
environment variable bounds the worker count for parallel sections
(0 or unset = auto); output ordering is fixed by input order regardless.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import DataError, FormatError
from .hadamard import PadInfo, hadamard_inverse, hadamard_transform
from .prune import prune_unstructured
from .quant import (
    aggregate_bits_per_parameter,
    bits_per_parameter,
    load_packed,
    pack,
    quantize,
    save_packed,
    search_bounds,
    unpack,
)
from .stats import DEFAULT_EPSILON, EPS_SWEEP_GRID, eps_sweep, paired_hadamard_analysis
from .tensor import Seed, Tensor, load_tensor, save_tensor
from .toymodel import (
    HADAMARD_MODES,
    TUNE_MODES,
    evaluate_pipeline,
    make_toy_input,
    make_toy_layer,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def worker_count() -> int:
    """CSRT_THREADS bound; 0 or unset means auto."""
    raw = os.environ.get("CSRT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CSRT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"CSRT_THREADS must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _ordered_map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _echo_config(cmd: str, args: argparse.Namespace) -> None:
    skip = {"func", "command"}
    pairs = [f"{k}={v!r}" for k, v in sorted(vars(args).items()) if k not in skip]
    pairs.append(f"csrt_threads={worker_count()}")
    print(f"config[{cmd}]: " + " ".join(pairs), file=sys.stderr)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _check_bits(bits: int) -> int:
    if not 2 <= bits <= 8:
        raise ValueError(f"--bits must be in [2, 8], got {bits}")
    return bits


def _check_fraction(fraction: float, flag: str) -> float:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"{flag} must be in [0, 1], got {fraction}")
    return fraction


def _run_hadamard(args) -> int:
    t = load_tensor(args.input)
    if args.inverse:
        if args.padinfo is None:
            raise ValueError("--inverse requires --padinfo")
        info = json.loads(Path(args.padinfo).read_text())
        pad = PadInfo(int(info["original_dim"]), int(info["padded_dim"]))
        save_tensor(hadamard_inverse(t, pad), args.output)
    else:
        out, pad = hadamard_transform(t)
        save_tensor(out, args.output)
        if args.padinfo is not None:
            Path(args.padinfo).write_text(
                json.dumps({"original_dim": pad.original_dim, "padded_dim": pad.padded_dim}) + "\n"
            )
    return 0


def _run_quantize(args) -> int:
    _check_bits(args.bits)
    _check_fraction(args.prune, "--prune")
    t = load_tensor(args.input)
    pad = None
    work = t
    if args.hadamard:
        work, pad = hadamard_transform(t)
    mask_bits = None
    values = work.array.reshape(-1)
    if args.prune > 0.0:
        _, mask = prune_unstructured(work, args.prune, Seed(args.seed))
        mask_bits = mask.bits
        values = values[mask_bits]
    params = search_bounds(Tensor(values), args.bits, args.search_steps)
    codes = quantize(Tensor(values), params)
    pt = pack(
        codes, params, t.shape, pad=pad, mask=mask_bits, hadamard_applied=args.hadamard
    )
    save_packed(pt, args.output)
    return 0


def _run_dequantize(args) -> int:
    pt = load_packed(args.input)
    out = unpack(pt)
    if pt.hadamard_applied:
        pad = pt.pad or PadInfo(out.shape[-1], out.shape[-1])
        out = hadamard_inverse(out, pad)
    save_tensor(out, args.output)
    return 0


def _read_manifest(path: str) -> list[tuple[Tensor, Tensor]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'pre<TAB>post', got {line!r}")
        pairs.append((load_tensor(parts[0]), load_tensor(parts[1])))
    return pairs


def _run_analyze(args) -> int:
    if args.eps <= 0:
        raise ValueError(f"--eps must be positive, got {args.eps}")
    pairs = _read_manifest(args.pairs)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 tensor pairs, got {len(pairs)}")
    name = Path(args.pairs).stem
    if args.eps_sweep:
        rows = [
            [eps, "delta_p", name, r.n_effective, r.statistic, r.p_value, r.d_z]
            for eps, r in eps_sweep(pairs, EPS_SWEEP_GRID, seed=Seed(args.seed))
        ]
        _write_csv(
            args.out,
            ["epsilon", "test", "name", "N", "statistic", "p_value", "d_z"],
            rows,
        )
    else:
        res = paired_hadamard_analysis(
            pairs, eps=args.eps, sample_k=args.sample, seed=Seed(args.seed)
        )
        rows = [
            [label, name, r.n_effective, r.statistic, r.p_value, r.d_z]
            for label, r in (
                ("delta_w", res.delta_w),
                ("delta_r", res.delta_r),
                ("delta_p", res.delta_p),
            )
        ]
        _write_csv(args.out, ["test", "name", "N", "statistic", "p_value", "d_z"], rows)
    return 0


def _parse_list(raw: str, conv, flag: str) -> list:
    try:
        return [conv(part) for part in raw.split(",") if part != ""]
    except ValueError:
        raise ValueError(f"cannot parse {flag} value {raw!r}") from None


def _run_toy_eval(args) -> int:
    bits_list = [_check_bits(b) for b in _parse_list(args.bits, int, "--bits")]
    prune_list = [_check_fraction(p, "--prune") for p in _parse_list(args.prune, float, "--prune")]
    had_list = _parse_list(args.hadamard, str, "--hadamard")
    for mode in had_list:
        if mode not in HADAMARD_MODES:
            raise ValueError(f"--hadamard entries must be in {HADAMARD_MODES}, got {mode!r}")
    if args.seeds < 1:
        raise ValueError(f"--seeds must be >= 1, got {args.seeds}")
    tune = args.tune if args.finetune else "none"

    grid = [
        (b, p, h, s)
        for b in bits_list
        for p in prune_list
        for h in had_list
        for s in range(args.seeds)
    ]

    def cell(item):
        b, p, h, s = item
        layer = make_toy_layer(Seed(s))
        x = make_toy_input(Seed(s), tokens=layer.tokens, dim=layer.dim)
        rep = evaluate_pipeline(
            layer, x, b, p, hadamard_mode=h, tune=tune, seed=Seed(s)
        )
        return [s, b, p, h, tune, rep.mse, rep.psnr_db, rep.bits_per_param]

    rows = _ordered_map(cell, grid)
    _write_csv(
        args.out,
        ["seed", "bits", "prune", "hadamard", "tune", "mse", "psnr_db", "bits_per_param"],
        rows,
    )
    return 0


def _run_report(args) -> int:
    packed = []
    rows = []
    for path in args.input:
        pt = load_packed(path)
        nbytes = os.path.getsize(path)
        packed.append(pt)
        rows.append([path, nbytes, nbytes / 1e6, bits_per_parameter(pt)])
    total_bytes = sum(r[1] for r in rows)
    rows.append(["TOTAL", total_bytes, total_bytes / 1e6, aggregate_bits_per_parameter(packed)])
    if args.csv is not None:
        _write_csv(args.csv, ["file", "bytes", "mb", "bits_per_param"], rows)
    for row in rows:
        print(f"{row[0]}: {row[1]} bytes  {row[2]:.6f} MB  {_fmt(row[3])} bits/param")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="hadaquant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hadamard", help="transform a CSRT tensor (or invert with --padinfo)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--padinfo", help="JSON pad metadata: written forward, read for --inverse")
    p.set_defaults(func=_run_hadamard)

    p = sub.add_parser("quantize", help="CSRT -> CSRQ with optional Hadamard and pruning")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--prune", type=float, default=0.0)
    p.add_argument("--hadamard", action="store_true")
    p.add_argument("--search-steps", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_run_quantize)

    p = sub.add_parser("dequantize", help="CSRQ -> CSRT (undoes Hadamard when recorded)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=_run_dequantize)

    p = sub.add_parser("analyze", help="paired pre/post statistics from a manifest")
    p.add_argument("--pairs", required=True, help="manifest: one 'pre<TAB>post' line per pair")
    p.add_argument("--eps", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--eps-sweep", action="store_true")
    p.add_argument("--sample", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=_run_analyze)

    p = sub.add_parser("toy-eval", help="toy layer quantization grid")
    p.add_argument("--bits", default="2", help="comma-separated bit-widths")
    p.add_argument("--prune", default="0", help="comma-separated prune fractions")
    p.add_argument("--hadamard", default="wa", help="comma-separated modes: off,w,wa")
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--tune", choices=TUNE_MODES, default="all")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=_run_toy_eval)

    p = sub.add_parser("report", help="size and bits/parameter of CSRQ files")
    p.add_argument("--in", dest="input", nargs="+", required=True)
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=_run_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _echo_config(args.command, args)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
