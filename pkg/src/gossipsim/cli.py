"""Command-line entry point: ``gossipsim run | graph dump | schedule preview``.

Exit codes: 0 success, 2 invalid config, 3 training diverged, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from gossipsim import __version__
from gossipsim.config import ExperimentConfig, SweepConfig, load_document, parse_document
from gossipsim.engine import (
    Simulation,
    StrategyKind,
    message_volume,
    topology_for,
    total_message_volume,
)
from gossipsim.errors import ConfigError, DivergenceError
from gossipsim.metrics import (
    MetricsRecord,
    rank_strategies,
    write_metrics_csv,
    write_metrics_ndjson,
    write_rank_csv,
)
from gossipsim.model import param_count
from gossipsim.schedules import ada_degree, effective_lr
from gossipsim.topology import build_topology, mixing_matrix, spectral_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

SUMMARY_KIND = "gossipsim.summary"

# flag dest -> config key
_OVERRIDES = {
    "strategy": "strategy",
    "topology": "topology",
    "n_workers": "n_workers",
    "k0": "k0",
    "gamma_k": "gamma_k",
    "k_min": "k_min",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "heterogeneity": "heterogeneity",
    "update_order": "update_order",
    "out": "out",
    "parallelism": "parallelism",
}


class _ConfigFailure(Exception):
    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


def _locate_key(text: str, key: str, toml: bool) -> int | None:
    if toml:
        pattern = rf"^[ \t]*(?:\[\s*(?:[\w.]+\.)?{re.escape(key)}\s*\]|{re.escape(key)}\s*=)"
    else:
        pattern = rf'"{re.escape(key)}"\s*:'
    m = re.search(pattern, text, flags=re.MULTILINE)
    if m is None:
        return None
    return text.count("\n", 0, m.start()) + 1


def _anchor(exc: ConfigError, path: Path, flags: dict[str, Any]) -> str:
    """Prefix a config error with ``path:line`` (or the flag that caused it)."""
    msg = str(exc)
    if msg.startswith(f"{path}:"):
        return msg
    key = exc.key
    if key is not None and key in flags:
        return f"--{key.replace('_', '-')}: {msg}"
    line = 1
    if key is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError:
            text = ""
        found = _locate_key(text, key, path.suffix.lower() == ".toml")
        if found is not None:
            line = found
    return f"{path}:{line}: {msg}"


def _strategy_mode(strategy: str) -> str:
    kind = StrategyKind.parse(strategy)
    if kind.centralized:
        return "centralized"
    if kind is StrategyKind.DECENTRALIZED_ADAPTIVE:
        return "adaptive"
    return "decentralized"


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, dest) for dest, key in _OVERRIDES.items() if getattr(args, dest, None) is not None}


def load_run_config(path: str | Path, flags: dict[str, Any]) -> ExperimentConfig | SweepConfig:
    """Load a config (or a previous run's summary.json) and apply flag overrides.

    Raises :class:`_ConfigFailure` with a line-anchored message.
    """
    path = Path(path)
    try:
        doc = load_document(path)
        if doc.get("kind") == SUMMARY_KIND and isinstance(doc.get("config"), dict):
            doc = dict(doc["config"])
        if "topology" in flags and "strategy" not in flags:
            doc["strategy"] = _strategy_mode(doc.get("strategy", "D_ring"))
        elif "strategy" in flags and "topology" not in flags:
            doc.pop("topology", None)
        doc.update(flags)
        return parse_document(doc)
    except ConfigError as exc:
        raise _ConfigFailure(_anchor(exc, path, flags)) from None


def _write_summary(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_cell(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[MetricsRecord], dict[str, Any]]:
    """Run one experiment, streaming records to ``out_dir``.

    Returns the records and the summary payload; divergence is recorded in
    the summary rather than raised.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = Simulation(cfg)
    records: list[MetricsRecord] = []
    csv_fh = (out_dir / "metrics.csv").open("w", encoding="utf-8", newline="")
    nd_fh = (out_dir / "metrics.ndjson").open("w", encoding="utf-8") if "ndjson" in cfg.emit else None
    try:
        write_metrics_csv([], csv_fh, header=True)
        for rec in sim.records():
            records.append(rec)
            write_metrics_csv([rec], csv_fh, header=False)
            if nd_fh is not None:
                write_metrics_ndjson([rec], nd_fh)
    except DivergenceError:
        pass
    finally:
        csv_fh.close()
        if nd_fh is not None:
            nd_fh.close()
    result = sim.result.summary()
    result["total_message_volume"] = total_message_volume(cfg)
    payload = {"kind": SUMMARY_KIND, "version": __version__, "config": cfg.to_dict(), "result": result}
    _write_summary(out_dir / "summary.json", payload)
    return records, payload


def _run_single(cfg: ExperimentConfig) -> int:
    out_dir = cfg.output_dir()
    _, payload = _run_cell(cfg, out_dir)
    result = payload["result"]
    if result["diverged"]:
        print(f"error: training diverged: {result['divergence']}", file=sys.stderr)
        return EXIT_DIVERGED
    print(
        f"{cfg.run_id}: test_accuracy={result['final_test_accuracy']:.4f} "
        f"train_loss={result['final_train_loss']:.4f} -> {out_dir}",
        file=sys.stderr,
    )
    return EXIT_OK


def _run_sweep(sweep: SweepConfig, jobs: int) -> int:
    out_dir = sweep.base.output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = sweep.cells()

    def one(cfg: ExperimentConfig) -> tuple[list[MetricsRecord], dict[str, Any]]:
        return _run_cell(cfg, out_dir / cfg.run_id)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(one, cells))
    else:
        outcomes = [one(cfg) for cfg in cells]
    by_run = {cfg.run_id: outcome for cfg, outcome in zip(cells, outcomes)}

    with (out_dir / "metrics.csv").open("w", encoding="utf-8", newline="") as fh:
        write_metrics_csv([], fh, header=True)
        for records, _ in outcomes:
            write_metrics_csv(records, fh, header=False)

    skipped = []
    with (out_dir / "ranks.csv").open("w", encoding="utf-8", newline="") as fh:
        header = True
        for group, group_cells in sweep.groups():
            streams = {cfg.strategy.value: by_run[cfg.run_id][0] for cfg in group_cells}
            if any(by_run[cfg.run_id][1]["result"]["diverged"] for cfg in group_cells):
                skipped.append(group)
                continue
            write_rank_csv(rank_strategies(streams), fh, group=group, header=header)
            header = False

    failed = [p["result"]["run_id"] for _, p in outcomes if p["result"]["diverged"]]
    payload = {
        "kind": SUMMARY_KIND,
        "version": __version__,
        "config": sweep.to_dict(),
        "cells": [p["result"] for _, p in outcomes],
        "failed_cells": failed,
        "unranked_groups": skipped,
    }
    _write_summary(out_dir / "summary.json", payload)
    for run_id in failed:
        print(f"error: cell {run_id} diverged: {by_run[run_id][1]['result']['divergence']}", file=sys.stderr)
    print(f"sweep: {len(cells) - len(failed)}/{len(cells)} cells completed -> {out_dir}", file=sys.stderr)
    return EXIT_DIVERGED if failed else EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, _flag_overrides(args))
    if isinstance(cfg, SweepConfig):
        return _run_sweep(cfg, args.jobs)
    return _run_single(cfg)


def graph_document(kind: str, n: int, k: int | None = None, dims: tuple[int, int] | None = None) -> dict[str, Any]:
    topo = build_topology(kind, n, k=k, torus_dims=dims)
    mix = mixing_matrix(topo)
    return {
        "topology": topo.to_dict(),
        "mixing": mix.to_dict(),
        "spectral": spectral_report(mix).to_dict(),
    }


def cmd_graph_dump(args: argparse.Namespace) -> int:
    try:
        doc = graph_document(args.kind, args.n, args.k, tuple(args.dims) if args.dims else None)
    except ConfigError as exc:
        raise _ConfigFailure(str(exc)) from None
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


PREVIEW_COLUMNS = ("epoch", "k", "lr", "degree", "message_volume")


def schedule_rows(cfg: ExperimentConfig) -> list[tuple[int, int | None, float, int, float]]:
    """Per-epoch (epoch, k, lr, degree, message volume) exactly as a run uses them."""
    strategy = cfg.strategy_obj
    steps = cfg.steps_per_epoch()
    n_params = param_count(cfg.model_spec())
    rows = []
    for epoch in range(cfg.epochs):
        degree = topology_for(strategy, cfg.n_workers, epoch, cfg.torus_dims).max_degree
        k = ada_degree(strategy.ada, epoch) if strategy.ada is not None else None
        lr = effective_lr(cfg.schedule, epoch, cfg.batch_size, degree)
        vol = message_volume(
            [degree], steps, n_params, centralized=strategy.kind.centralized, n_workers=cfg.n_workers
        )
        rows.append((epoch, k, lr, degree, vol))
    return rows


def cmd_schedule_preview(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, _flag_overrides(args))
    if isinstance(cfg, SweepConfig):
        cfg = cfg.base
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(PREVIEW_COLUMNS)
    for epoch, k, lr, degree, vol in schedule_rows(cfg):
        writer.writerow([epoch, "" if k is None else k, repr(lr), degree, repr(vol)])
    return EXIT_OK


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flags win over the file)")
    g.add_argument("--strategy")
    g.add_argument("--topology")
    g.add_argument("--n-workers", type=int)
    g.add_argument("--k0", type=int)
    g.add_argument("--gamma-k", type=float)
    g.add_argument("--k-min", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--heterogeneity", type=float)
    g.add_argument("--update-order")
    g.add_argument("--out")
    g.add_argument("--parallelism", type=int, help="threads per run for worker gradients")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gossipsim", description="Decentralized SGD topology simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment or sweep from a JSON/TOML config")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=1, help="sweep cells to run concurrently")
    _add_override_flags(run)
    run.set_defaults(func=cmd_run)

    graph = sub.add_parser("graph", help="inspect communication graphs")
    graph_sub = graph.add_subparsers(dest="graph_command", required=True)
    dump = graph_sub.add_parser("dump", help="print topology, mixing weights and spectrum as JSON")
    dump.add_argument("kind")
    dump.add_argument("n", type=int)
    dump.add_argument("--k", type=int, help="ring lattice half-degree")
    dump.add_argument("--dims", type=int, nargs=2, metavar=("ROWS", "COLS"), help="torus shape")
    dump.set_defaults(func=cmd_graph_dump)

    sched = sub.add_parser("schedule", help="inspect learning-rate and degree schedules")
    sched_sub = sched.add_subparsers(dest="schedule_command", required=True)
    preview = sched_sub.add_parser("preview", help="print the per-epoch schedule a run would use")
    preview.add_argument("config")
    _add_override_flags(preview)
    preview.set_defaults(func=cmd_schedule_preview)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return int(args.func(args))
    except _ConfigFailure as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
