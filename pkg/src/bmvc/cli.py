"""Command-line entry point: ``python -m bmvc <command> ...``.

Commands
    train     train one model, evaluate it, write manifest/history/checkpoint/metrics
    ablate    mode x fusion x seed grid, one CSV with a mean/std block
    grid      lambda sweep, per-run CSV plus a plot-ready summary
    diagnose  single-view vs joint vs balanced training, per-view report
    synth     write a synthetic dataset directory
    replay    re-run a command from its manifest.json

Exit codes: 0 ok, 1 runtime failure, 2 usage error.  Set ``BMVC_THREADS=0``
for single-threaded, bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import graph as gr
from .data import SynthSpec, ViewDataset, ViewSpec, fingerprint, load_dataset, minmax_scale, save_dataset, synth_generate
from .errors import BMvCError, DataError
from .evaluation import MetricsReport, evaluate
from .loss import Mode
from .model import FusionMode, save_checkpoint
from .train import TrainConfig, embed, per_view_vcr_values, train, write_history

log = logging.getLogger("bmvc")

MODES = [m.value for m in Mode]
FUSIONS = [f.value for f in FusionMode]
DEFAULT_LAMBDAS = [10.0 ** e for e in range(-5, 6)]
METRICS = ("acc", "nmi", "ari", "fscore")


class UsageError(Exception):
    """Bad flag combination detected after parsing (exit code 2)."""


# --- environment ---------------------------------------------------------------

def thread_setting() -> Optional[int]:
    """Parsed ``BMVC_THREADS``; None when unset."""
    raw = os.environ.get("BMVC_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"BMVC_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"BMVC_THREADS must be >= 0, got {n}")
    return n


def deterministic() -> bool:
    return thread_setting() == 0


def _blas_limit():
    n = thread_setting()
    if n is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(n, 1))


def _workers() -> int:
    n = thread_setting()
    return 1 if not n else n


# --- helpers -------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _str_list(choices):
    def parse(text):
        items = [t for t in text.replace(",", " ").split()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}; got {text!r}")
        return items
    return parse


def _load(path: str) -> ViewDataset:
    if not Path(path).is_dir():
        raise DataError(f"{path}: not a dataset directory")
    return minmax_scale(load_dataset(path))


def _config(args, **overrides) -> TrainConfig:
    kw = dict(
        n_clusters=args.clusters, lam=args.lam, learning_rate=args.lr, epochs=args.epochs,
        k_neighbors=args.k_neighbors, fusion=args.fusion, mode=args.mode,
        graph_refresh_interval=args.graph_refresh, seed=args.seed,
    )
    kw.update(overrides)
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_k(ds: ViewDataset, args) -> None:
    if not 1 <= args.k_neighbors <= ds.n_samples - 2:
        raise UsageError(f"--k-neighbors must lie in [1, {ds.n_samples - 2}] for N={ds.n_samples}")
    if args.clusters > ds.n_samples:
        raise UsageError(f"--clusters {args.clusters} exceeds the number of samples {ds.n_samples}")


def _need_labels(ds: ViewDataset, command: str) -> None:
    if ds.labels is None:
        raise DataError(f"{command} needs ground-truth labels (labels.csv) to score runs")


def _metrics_row(report: Optional[MetricsReport]) -> dict:
    if report is None:
        return {m: "" for m in METRICS}
    return {m: repr(float(getattr(report, m))) for m in METRICS}


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _start_manifest(out: Path, args, argv: Sequence[str], config: Optional[dict] = None) -> dict:
    manifest = {
        "artifact": "bmvc",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "data": str(Path(args.data).resolve()) if getattr(args, "data", None) else None,
        "fingerprint": fingerprint(args.data) if getattr(args, "data", None) else None,
        "bmvc_threads": os.environ.get("BMVC_THREADS"),
        "outputs": {},
        "started": _now(),
        "finished": None,
        "status": "running",
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _finish_manifest(out: Path, manifest: dict, outputs: dict, status: str = "ok") -> None:
    manifest["outputs"] = outputs
    manifest["finished"] = _now()
    manifest["status"] = status
    _write_json(out / "manifest.json", manifest)


def fit_and_score(ds: ViewDataset, config: TrainConfig, restarts: int, checkpoint=None, checkpoint_every=0):
    """Train, embed and (if labels exist) score the joint features."""
    params, history = train(ds, config, checkpoint_path=checkpoint, checkpoint_every=checkpoint_every)
    zs, f = embed(params, ds)
    report = None
    if ds.labels is not None:
        report = evaluate(f, ds.labels, config.n_clusters, restarts=restarts, seed=config.seed)
    return params, history, zs, f, report


def _safe_run(job):
    """Worker for ablate/grid: returns (key, report, error string)."""
    key, ds, config, restarts = job
    try:
        with _blas_limit():
            *_, report = fit_and_score(ds, config, restarts)
        return key, report, ""
    except (BMvCError, ArithmeticError, ValueError) as exc:
        return key, None, f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs):
    workers = _workers()
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            log.info("run %s", job[0])
            yield _safe_run(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_safe_run, jobs)


# --- commands ------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    ds = _load(args.data)
    _check_k(ds, args)
    config = _config(args)
    out = args.out
    manifest = _start_manifest(out, args, argv, config.to_dict())
    outputs = {"manifest": "manifest.json", "history": "history.csv", "checkpoint": "model.bmvc"}
    try:
        with _blas_limit():
            _, history, _, _, report = fit_and_score(
                ds, config, args.restarts, checkpoint=out / "model.bmvc", checkpoint_every=args.checkpoint_every)
    except Exception:
        _finish_manifest(out, manifest, outputs, status="failed")
        raise
    write_history(history, out / "history.csv", zero_seconds=deterministic())
    if report is not None:
        _write_json(out / "metrics.json", report.to_json())
        outputs["metrics"] = "metrics.json"
        print(" ".join(f"{m}={getattr(report, m) * 100:.2f}" for m in METRICS))
    else:
        log.warning("no labels.csv: skipping evaluation")
    _finish_manifest(out, manifest, outputs)
    return 0


def _summary_rows(rows, group_keys):
    """Mean and (population) std per group over successful runs."""
    out = []
    groups = {}
    for row in rows:
        if row["status"] == "ok":
            groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)
    for key, members in groups.items():
        vals = {m: np.array([float(r[m]) for r in members]) for m in METRICS}
        for kind, fn in (("mean", np.mean), ("std", np.std)):
            row = dict(zip(group_keys, key))
            row.update(kind=kind, seed="", status=f"n={len(members)}", error="")
            row.update({m: repr(float(fn(vals[m]))) for m in METRICS})
            out.append(row)
    return out


def cmd_ablate(args, argv) -> int:
    ds = _load(args.data)
    _need_labels(ds, "ablate")
    _check_k(ds, args)
    seeds = args.seeds or [args.seed]
    jobs = []
    for mode in args.modes:
        for fusion in args.fusions:
            for seed in seeds:
                jobs.append(((mode, fusion, seed), ds, _config(args, mode=mode, fusion=fusion, seed=seed),
                             args.restarts))
    manifest = _start_manifest(args.out, args, argv, _config(args).to_dict())
    rows = []
    for (mode, fusion, seed), report, err in _run_jobs(jobs):
        if err:
            log.error("ablate %s/%s/seed %d failed: %s", mode, fusion, seed, err)
        rows.append(dict(kind="run", mode=mode, fusion=fusion, seed=seed, status="failed" if err else "ok",
                         error=err, **_metrics_row(report)))
    header = ["kind", "mode", "fusion", "seed", *METRICS, "status", "error"]
    _write_csv(args.out / "ablation.csv", header, rows + _summary_rows(rows, ("mode", "fusion")))
    failed = sum(r["status"] != "ok" for r in rows)
    _finish_manifest(args.out, manifest, {"ablation": "ablation.csv"}, status="ok" if not failed else f"{failed} failed")
    print(f"{len(rows) - failed}/{len(rows)} runs ok -> {args.out / 'ablation.csv'}")
    return 0 if failed < len(rows) else 1


def cmd_grid(args, argv) -> int:
    ds = _load(args.data)
    _need_labels(ds, "grid")
    _check_k(ds, args)
    lambdas = sorted(set(args.lambdas)) if args.lambdas else list(DEFAULT_LAMBDAS)
    if any(lam < 0 for lam in lambdas):
        raise UsageError("lambda values must be >= 0")
    seeds = args.seeds or [args.seed]
    jobs = [((lam, seed), ds, _config(args, lam=lam, seed=seed), args.restarts) for lam in lambdas for seed in seeds]
    manifest = _start_manifest(args.out, args, argv, _config(args).to_dict())
    rows = []
    for (lam, seed), report, err in _run_jobs(jobs):
        if err:
            log.error("grid lambda=%g seed %d failed: %s", lam, seed, err)
        rows.append(dict(lam=repr(lam), seed=seed, status="failed" if err else "ok", error=err, **_metrics_row(report)))
    _write_csv(args.out / "grid.csv", ["lam", "seed", *METRICS, "status", "error"], rows)
    summary = []
    for lam in lambdas:
        ok = [r for r in rows if r["lam"] == repr(lam) and r["status"] == "ok"]
        entry = {"lam": repr(lam), "n_ok": len(ok)}
        for m in METRICS:
            entry[m] = repr(float(np.mean([float(r[m]) for r in ok]))) if ok else ""
        summary.append(entry)
    _write_csv(args.out / "grid_summary.csv", ["lam", *METRICS, "n_ok"], summary)
    failed = sum(r["status"] != "ok" for r in rows)
    _finish_manifest(args.out, manifest, {"grid": "grid.csv", "summary": "grid_summary.csv"},
                     status="ok" if not failed else f"{failed} failed")
    print(f"{len(rows) - failed}/{len(rows)} runs ok -> {args.out / 'grid_summary.csv'}")
    return 0 if failed < len(rows) else 1


def _score(x, ds: ViewDataset, config: TrainConfig, restarts: int):
    if ds.labels is None:
        return None
    return evaluate(x, ds.labels, config.n_clusters, restarts=restarts, seed=config.seed).to_json()


def _trace(history, prefix: str, m: int):
    return [history.column(f"{prefix}_{r + 1}").tolist() for r in range(m)]


def cmd_diagnose(args, argv) -> int:
    ds = _load(args.data)
    _check_k(ds, args)
    out, m, names = args.out, ds.n_views, ds.view_names
    base = _config(args)
    manifest = _start_manifest(out, args, argv, base.to_dict())
    outputs = {"report": "diagnose.json"}
    regimes = {}
    with _blas_limit():
        # (i) one autoencoder per view, reconstruction only
        single = {"embeddings": {}, "zeta": [], "gnorm_rec": [], "gnorm_vcr": []}
        fs = []
        for r in range(m):
            sub = ds.subset_views([r])
            cfg = _config(args, mode="rec")
            params, history, zs, f, _ = fit_and_score(sub, cfg, args.restarts)
            single["embeddings"][names[r]] = _score(zs[0], ds, cfg, args.restarts)
            single["zeta"].append(per_view_vcr_values(params, sub, cfg)[0])
            single["gnorm_rec"] += _trace(history, "gnorm_rec", 1)
            single["gnorm_vcr"] += _trace(history, "gnorm_vcr", 1)
            write_history(history, out / f"history_single_{names[r]}.csv", zero_seconds=deterministic())
            outputs[f"history_single_{names[r]}"] = f"history_single_{names[r]}.csv"
            fs.append(f)
        single["embeddings"]["joint"] = _score(np.hstack(fs), ds, base, args.restarts)
        regimes["single_view"] = single

        # (ii) joint reconstruction-only and (iii) the balanced objective
        for regime, mode in (("joint_rec", "rec"), ("rec+vcr", "rec+vcr")):
            cfg = _config(args, mode=mode)
            params, history, zs, f, _ = fit_and_score(ds, cfg, args.restarts)
            entry = {"embeddings": {names[r]: _score(zs[r], ds, cfg, args.restarts) for r in range(m)}}
            entry["embeddings"]["joint"] = _score(f, ds, cfg, args.restarts)
            entry["zeta"] = per_view_vcr_values(params, ds, cfg)
            entry["gnorm_rec"] = _trace(history, "gnorm_rec", m)
            entry["gnorm_vcr"] = _trace(history, "gnorm_vcr", m)
            tag = regime.replace("+", "_")
            write_history(history, out / f"history_{tag}.csv", zero_seconds=deterministic())
            outputs[f"history_{tag}"] = f"history_{tag}.csv"
            regimes[regime] = entry
            if mode == "rec+vcr":
                gr.save_graph(gr.can_graph(f, args.k_neighbors), out / "graph_joint.txt")
                outputs["graph_joint"] = "graph_joint.txt"
        for r in range(m):
            gr.save_graph(gr.can_graph(ds.views[r], args.k_neighbors), out / f"graph_{names[r]}.txt")
            outputs[f"graph_{names[r]}"] = f"graph_{names[r]}.txt"

    report = {"views": list(names), "lambda": base.lam, "regimes": regimes}
    _write_json(out / "diagnose.json", report)
    for regime, entry in regimes.items():
        accs = {k: (v["acc"]["percent"] if v else None) for k, v in entry["embeddings"].items()}
        zeta = ", ".join(f"{z:.4f}" for z in entry["zeta"])
        print(f"{regime:12s} acc {accs}  zeta [{zeta}]")
    _finish_manifest(out, manifest, outputs)
    return 0


def cmd_synth(args, argv) -> int:
    spec = SynthSpec(args.n, args.clusters, tuple(args.view), args.seed)
    try:
        spec.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(synth_generate(spec), args.out)
    print(f"wrote {args.n} samples x {len(args.view)} views to {args.out}")
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    recorded = manifest.get("argv")
    if not recorded:
        raise DataError(f"{args.manifest}: no recorded argv")
    data = args.data or manifest.get("data")
    if manifest.get("fingerprint") is not None:
        now = fingerprint(data)
        if now != manifest["fingerprint"]:
            changed = sorted(k for k in set(now) | set(manifest["fingerprint"])
                             if now.get(k) != manifest["fingerprint"].get(k))
            raise DataError(f"dataset at {data} does not match the manifest fingerprint (changed: {', '.join(changed)})")
    replay = list(recorded)
    if data is not None:
        replay += ["--data", str(data)]
    return main(replay + ["--out", str(args.out)])


# --- parser --------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (views.txt + CSVs [+ labels.csv])")
    p.add_argument("--clusters", type=int, required=True, help="number of clusters")
    p.add_argument("--lambda", dest="lam", type=float, default=10.0, help="VCR weight (default 10)")
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--k-neighbors", type=int, default=10)
    p.add_argument("--fusion", choices=FUSIONS, default="cat")
    p.add_argument("--mode", choices=MODES, default="rec+vcr")
    p.add_argument("--graph-refresh", type=int, default=1, help="rebuild the joint graph every N epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10, help="k-means restarts")
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmvc", description="Balanced multi-view clustering.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser.add_argument("--version", action="version", version=f"bmvc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate one model")
    _add_train_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0, help="extra checkpoints every N epochs")

    p = sub.add_parser("ablate", help="mode x fusion x seed ablation")
    _add_train_flags(p)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: --seed)")
    p.add_argument("--modes", type=_str_list(MODES), default=MODES)
    p.add_argument("--fusions", type=_str_list(FUSIONS), default=FUSIONS)

    p = sub.add_parser("grid", help="lambda sweep")
    _add_train_flags(p)
    p.add_argument("--lambdas", type=_float_list, help="comma-separated values (default 1e-5..1e5 by decades)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: --seed)")

    p = sub.add_parser("diagnose", help="per-view imbalance report")
    _add_train_flags(p)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--view", type=_view_spec, action="append", required=True, metavar="DIM:SEP:SIGMA")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest", type=Path)
    p.add_argument("--data", help="dataset directory (default: the recorded path)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _view_spec(text: str) -> ViewSpec:
    try:
        return ViewSpec.parse(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


COMMANDS = {
    "train": cmd_train, "ablate": cmd_ablate, "grid": cmd_grid,
    "diagnose": cmd_diagnose, "synth": cmd_synth, "replay": cmd_replay,
}


def _recordable(argv: Sequence[str]) -> List[str]:
    """argv without --data/--out so a manifest can be replayed elsewhere."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ("--data", "--out"):
            skip = True
            continue
        if tok.startswith(("--data=", "--out=")):
            continue
        out.append(tok)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("bmvc").setLevel(level)
    try:
        thread_setting()
        if args.command not in ("synth", "replay"):
            args.out.mkdir(parents=True, exist_ok=True)
        cmd_argv = _recordable([a for a in argv if a not in ("-v", "-vv", "--verbose")])
        return COMMANDS[args.command](args, cmd_argv)
    except UsageError as exc:
        print(f"bmvc {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (BMvCError, ArithmeticError, ValueError, OSError) as exc:
        print(f"bmvc {args.command}: error: {exc}", file=sys.stderr)
        return 1
