"""``agfusion`` command line: fuse tensor files, gradient checks, MAC benchmark, ablation.

Exit codes: 0 success, 2 usage error, 3 malformed config/tensor/weights
file, 4 shape or geometry mismatch, 5 a check failed (gradient check,
MAC counter discrepancy, every ablation run diverged).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import backend
from .aggregation import PipelineParams, forward_pipeline, load_state_dict, parse_strategy, state_dict
from .attention import MhaParams, count_macs, mha, projection_macs
from .config import ConfigError, RunConfig, load_config
from .degradation_sim import direction_check, rank, run_ablation
from .errors import ContractError, WeightsMismatch
from .gradsuite import run_suite
from .tape import no_tape
from .tensor_core import BevMap, Modality, reshape
from .tensor_io import FormatError, read_tensor, read_weights, write_tensor, write_weights
from .windowing import partition

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SHAPE, EXIT_CHECK = 0, 2, 3, 4, 5

CSV_FIELDS = ("seed", "strategy", "kind", "status", "steps", "train_mse", "holdout_mse",
              "gate_inside", "gate_outside")


def _out_dir(args, cfg: RunConfig) -> Path:
    d = Path(args.out_dir or cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _num(x: float) -> str:
    # repr round-trips; fixed text keeps reruns byte-identical
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(x)


def _stats(a: np.ndarray) -> dict:
    return {"min": float(a.min()), "max": float(a.max()), "mean": float(a.mean())}


# -- fuse ----------------------------------------------------------------------


def _sibling(path: Path, tag: str, suffix: str | None = None) -> Path:
    return path.with_name(f"{path.stem}.{tag}{suffix if suffix is not None else path.suffix}")


def cmd_fuse(args, cfg: RunConfig) -> int:
    g = cfg.geometry
    fusion = g.fusion(cfg.strategy)
    cam = read_tensor(args.cam)
    lidar = read_tensor(args.lidar)
    want = (g.height, g.width, g.channels)
    for label, t in (("cam", cam), ("lidar", lidar)):
        if t.shape != want:
            raise ContractError(f"{label} tensor has shape {t.shape}, config expects {want}")
    params = PipelineParams.zeros(fusion)
    state = read_weights(args.weights)
    try:
        load_state_dict(params, state)
    except WeightsMismatch as exc:
        raise FormatError("weights.manifest", str(exc)) from None
    with no_tape():
        res = forward_pipeline(BevMap(cam, Modality.CAMERA), BevMap(lidar, Modality.LIDAR),
                               fusion, params, "eval")
    out = Path(args.out) if args.out else _out_dir(args, cfg) / "Y.agt"
    out.parent.mkdir(parents=True, exist_ok=True)
    Y = res.Y.tensor.data
    write_tensor(out, Y)
    summary = {"strategy": cfg.strategy, "shape": list(Y.shape), "Y": _stats(Y), "Y_path": str(out)}
    if res.G is not None:
        gpath = _sibling(out, "gate")
        write_tensor(gpath, res.G.tensor.data)
        summary["G"] = _stats(res.G.tensor.data)
        summary["G_path"] = str(gpath)
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    _sibling(out, "summary", ".json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_init_weights(args, cfg: RunConfig) -> int:
    fusion = cfg.geometry.fusion(cfg.strategy)
    if args.zero:
        params = PipelineParams.zeros(fusion)
    else:
        params = PipelineParams.init(fusion, np.random.default_rng(args.seed if args.seed is not None else cfg.seeds[0]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weights(out, state_dict(params))
    print(f"wrote {len(state_dict(params))} tensors to {out}")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    tol = args.tol if args.tol is not None else cfg.gradcheck_tol
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    fault = (args.inject_fault, args.fault_scale) if args.inject_fault else None

    def progress(r, dt):
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark}  {r.name:<28s} max_rel_error={r.max_error:.3e}  worst={r.worst}  ({dt:.2f}s)")

    t0 = time.perf_counter()
    reports = run_suite(seed=seed, tol=tol, fault=fault, progress=progress)
    failed = [r for r in reports if not r.passed]
    record = {
        "tol": tol,
        "seed": seed,
        "fault": list(fault) if fault else None,
        "passed": not failed,
        "ops": [r.to_dict() for r in reports],
    }
    if args.out_dir:
        d = _out_dir(args, cfg)
        (d / "gradcheck.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{len(reports) - len(failed)}/{len(reports)} ops pass at tol {tol:g} "
          f"({time.perf_counter() - t0:.1f}s)")
    if failed:
        for r in failed:
            print(f"failed: {r.name} max_rel_error={r.max_error:.3e}")
        return EXIT_CHECK
    return EXIT_OK


# -- bench -----------------------------------------------------------------------


def measure_attention(height: int, width: int, channels: int, side: int, num_heads: int,
                      seed: int = 0, backend_name: str | None = None) -> dict:
    """Run windowed and global MHA once; return counted MACs and wall times."""
    rng = np.random.default_rng(seed)
    F = BevMap(rng.normal(size=(height, width, channels)), Modality.CAMERA)
    p = MhaParams.init(channels, num_heads, rng)
    out = {}
    with no_tape(), backend.use(backend_name or backend.name()):
        windows = partition(F, side).tokens
        flat = reshape(F.tensor, (1, height * width, channels))
        for mode, tokens in (("windowed", windows), ("global", flat)):
            with backend.MacCounter() as c:
                t0 = time.perf_counter()
                mha(tokens, tokens, p)
                out[f"{mode}_seconds"] = time.perf_counter() - t0
            out[f"{mode}_attention"] = c.attention
            out[f"{mode}_projection"] = c.projection
    return out


def bench_rows(sizes, windows, channels: int, num_heads: int, repeats: int = 1) -> list[dict]:
    rows = []
    for size in sizes:
        for h in windows:
            if size % h:
                continue
            row = {
                "H": size, "W": size, "h": h,
                "analytic_windowed": count_macs(size, size, channels, h, num_heads, "windowed"),
                "analytic_global": count_macs(size, size, channels, h, num_heads, "global"),
                "analytic_projection": projection_macs(size, size, channels),
            }
            for name in backend.available():
                best = None
                for _ in range(max(1, repeats)):
                    m = measure_attention(size, size, channels, h, num_heads, backend_name=name)
                    if best is None:
                        best = m
                    else:
                        for k in ("windowed_seconds", "global_seconds"):
                            best[k] = min(best[k], m[k])
                row[f"measured_windowed[{name}]"] = best["windowed_attention"]
                row[f"measured_global[{name}]"] = best["global_attention"]
                row[f"measured_projection[{name}]"] = best["windowed_projection"]
                row[f"ms_windowed[{name}]"] = 1e3 * best["windowed_seconds"]
                row[f"ms_global[{name}]"] = 1e3 * best["global_seconds"]
            rows.append(row)
    return rows


def discrepancies(rows: list[dict]) -> list[str]:
    bad = []
    for r in rows:
        for name in backend.available():
            for kind in ("windowed", "global", "projection"):
                got = r[f"measured_{kind}[{name}]"]
                want = r[f"analytic_{kind}"]
                if got != want:
                    bad.append(f"H={r['H']} h={r['h']} {kind}[{name}]: counted {got}, closed form {want}")
    return bad


def cmd_bench(args, cfg: RunConfig) -> int:
    b = cfg.bench
    sizes = b.sizes
    if args.sizes:
        try:
            sizes = [int(s) for s in args.sizes.split(",") if s]
        except ValueError:
            raise ConfigError("--sizes", f"expected comma-separated integers, got {args.sizes!r}") from None
    rows = bench_rows(sizes, b.windows, b.channels, b.num_heads, b.repeats)
    names = backend.available()
    header = ["H", "W", "h", "analytic_windowed", "analytic_global"]
    header += [f"measured_windowed[{n}]" for n in names] + [f"measured_global[{n}]" for n in names]
    header += [f"ms_windowed[{n}]" for n in names] + [f"ms_global[{n}]" for n in names]
    body = [[f"{r[h]:.3f}" if isinstance(r[h], float) else str(r[h]) for h in header] for r in rows]
    widths = [max([len(h)] + [len(row[i]) for row in body]) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in body]
    print("\n".join(lines))
    bad = discrepancies(rows)
    if args.out_dir:
        d = _out_dir(args, cfg)
        with open(d / "bench.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else header)
            w.writeheader()
            w.writerows(rows)
    if bad:
        for line in bad:
            print(f"discrepancy: {line}")
        return EXIT_CHECK
    print(f"counters match closed forms on all {len(rows)} rows")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------


def _workers() -> int:
    raw = os.environ.get("AGF_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("AGF_THREADS", f"expected an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("AGF_THREADS", "must be >= 0")
    return n


def run_ablation_grid(cfg: RunConfig, seeds, strategies) -> list[dict]:
    """Every (seed, strategy) run, returned in seed-major, strategy-list order."""
    jobs = [(seed, s) for seed in seeds for s in strategies]

    def one(job):
        seed, s = job
        return run_ablation(cfg.ablation(seed), s)

    n = _workers()
    if n == 0:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, jobs))          # map preserves submission order


def ablation_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r[k] if isinstance(r[k], (int, str)) else _num(r[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def ablation_jsonl(records: list[dict]) -> str:
    out = []
    for r in records:
        rec = {k: (None if isinstance(r[k], float) and math.isnan(r[k]) else r[k]) for k in CSV_FIELDS}
        out.append(json.dumps(rec, sort_keys=True))
    return "\n".join(out) + "\n"


def ablation_summary(records: list[dict]) -> str:
    lines = []
    for seed in sorted({r["seed"] for r in records}):
        group = [r for r in records if r["seed"] == seed]
        lines.append(f"seed {seed}")
        lines.append(f"  {'rank':>4s}  {'strategy':<12s} {'holdout_mse':>12s} {'train_mse':>12s}  status")
        for i, r in enumerate(rank(group), 1):
            lines.append(f"  {i:>4d}  {r['strategy']:<12s} {r['holdout_mse']:>12.6f} "
                         f"{r['train_mse']:>12.6f}  {r['status']}")
        kinds = {r["kind"] for r in group}
        if {"adaptive", "fixed", "conv_fuser"} <= kinds:
            d = direction_check(group)
            lines.append(f"  adaptive < best fixed ({d.best_fixed_name}) < conv_fuser: "
                         f"{'yes' if d.ordering else 'no'}")
            lines.append(f"  gate weight on camera: inside {d.gate_inside:.4f}, outside {d.gate_outside:.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg: RunConfig) -> int:
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    strategies = cfg.experiment.strategies
    if args.strategies:
        strategies = [s for s in args.strategies.split(",") if s]
        for s in strategies:
            parse_strategy(s)
    t0 = time.perf_counter()
    records = run_ablation_grid(cfg, seeds, strategies)
    d = _out_dir(args, cfg)
    (d / "ablation.csv").write_text(ablation_csv(records))
    (d / "ablation.jsonl").write_text(ablation_jsonl(records))
    summary = ablation_summary(records)
    (d / "summary.txt").write_text(summary)
    wdir = d / "weights"
    wdir.mkdir(exist_ok=True)
    for r in records:
        if r["status"] == "ok":
            write_weights(wdir / f"seed{r['seed']}_{r['strategy'].replace(':', '_')}.agw",
                          state_dict(r["params"]))
    sys.stdout.write(summary)
    print(f"({time.perf_counter() - t0:.1f}s, outputs in {d})", file=sys.stderr)
    return EXIT_OK if any(r["status"] == "ok" for r in records) else EXIT_CHECK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults built in)")
    common.add_argument("--seed", type=int, help="override the config seed(s)")
    common.add_argument("--out-dir", help="output directory (overrides config out_dir)")

    p = argparse.ArgumentParser(prog="agfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", parents=[common], help="run the pipeline on tensor files")
    f.add_argument("cam")
    f.add_argument("lidar")
    f.add_argument("weights")
    f.add_argument("--out", help="output tensor path for Y (default <out-dir>/Y.agt)")

    w = sub.add_parser("init-weights", parents=[common], help="write a weights file")
    w.add_argument("out")
    w.add_argument("--zero", action="store_true", help="zero every learned branch")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    g.add_argument("--tol", type=float)
    g.add_argument("--inject-fault", metavar="OP", choices=sorted(_tape_ops()),
                   help="scale this op's backward (harness self-test)")
    g.add_argument("--fault-scale", type=float, default=1.01)

    b = sub.add_parser("bench", parents=[common], help="windowed vs global attention MACs")
    b.add_argument("--sizes", help="comma-separated map sizes (H = W)")

    a = sub.add_parser("ablate", parents=[common], help="fusion-strategy degradation ablation")
    a.add_argument("--strategies", help="comma-separated, e.g. conv_fuser,fixed:0.5,adaptive")
    return p


def _tape_ops() -> set[str]:
    return {"add", "sub", "mul", "scale", "one_minus", "reshape", "transpose", "sum_all",
            "weighted_sum", "mse", "relu", "sigmoid", "concat_channels", "softmax",
            "layer_norm", "batch_norm", "affine", "attention_core", "hull_guard"}


COMMANDS = {
    "fuse": cmd_fuse,
    "init-weights": cmd_init_weights,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)           # usage errors exit 2
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
