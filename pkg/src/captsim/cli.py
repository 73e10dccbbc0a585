"""Batch command line: ``captsim {partition,train,compare,diagnose,sweep}``.

Exit codes: 0 on success, 1 on a runtime error (including unwritable
output), 2 on a usage or configuration error. Every CSV written here uses
six fractional digits for floats and an empty cell for missing values.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dataspace as ds
from .config import ConfigError, RunConfig, dump_config, load_config, tomllib
from .diagnostics import bound_check, delta_pi_sq
from .federation import PARTITION, derive_seed, run_experiment, setup

log = logging.getLogger("captsim")

METRIC_FIELDS = (
    "round",
    "overall_acc",
    "head_acc",
    "mid_acc",
    "tail_acc",
    "loss_general",
    "loss_class_aware",
    "delta_s2",
    "delta_pi2",
    "arm_E",
    "arm_p",
    "reward",
    "comm_units",
    "global_agg_flag",
)


class UsageError(Exception):
    pass


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return ""
        text = f"{float(value):.6f}"
        return "0.000000" if text == "-0.000000" else text
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[dict]) -> Path:
    """Write ``rows`` under ``header`` with ``\\n`` line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(row.get(k)) for k in header])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def emit_metrics(rows: Iterable[dict], path) -> Path:
    return write_csv(path, METRIC_FIELDS, rows)


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts; empty cells become ``None``."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ("round", "arm_E", "arm_p", "global_agg_flag"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
        return out


def _parse_set(items: Sequence[str]) -> dict:
    flat = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            flat[key.strip()] = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            # bare words such as ``capt`` or ``none``
            flat[key.strip()] = raw.strip()
    return flat


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(**{k.replace(".", "__"): v for k, v in overrides.items()})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _summary_lines(pairs: Sequence[tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in pairs)
    return "".join(f"{k.ljust(width)}  {format_value(v)}\n" for k, v in pairs)


# ---- subcommands ----


def cmd_partition(args) -> int:
    cfg = resolve_config(args)
    d = cfg.dataset
    counts = ds.longtail_counts(ds.LongTailSpec(d.num_classes, d.n_max, d.imbalance_ratio))
    part = ds.dirichlet_partition(
        counts, d.num_clients, d.alpha_dir, derive_seed(cfg.seed, PARTITION), min_client_size=d.min_client_size
    )
    out = _out_dir(args)
    header = ["client"] + [f"class_{c}" for c in range(d.num_classes)] + ["total"]
    rows = []
    for k in range(part.num_clients):
        row = {"client": k, "total": int(part.client_sizes[k])}
        row.update({f"class_{c}": int(part.matrix[k, c]) for c in range(d.num_classes)})
        rows.append(row)
    write_csv(out / "partition.csv", header, rows)
    split = ds.head_mid_tail(counts)
    summary = _summary_lines(
        [
            ("seed", cfg.seed),
            ("num_clients", part.num_clients),
            ("num_classes", part.num_classes),
            ("alpha_dir", float(d.alpha_dir)),
            ("imbalance_ratio", float(d.imbalance_ratio)),
            ("delta_pi2", delta_pi_sq(part)),
            ("head_classes", " ".join(map(str, sorted(split.head)))),
            ("mid_classes", " ".join(map(str, sorted(split.mid)))),
            ("tail_classes", " ".join(map(str, sorted(split.tail)))),
        ]
    )
    (out / "partition_summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    sim = run_experiment(cfg)
    emit_metrics([e.row() for e in sim.logs], out / "metrics.csv")
    sim.server.prompts.save(out / "checkpoint.npz")
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    last = sim.logs[-1].metrics
    sys.stdout.write(
        _summary_lines([("method", cfg.method), ("rounds", len(sim.logs))] + list(last.as_dict().items()))
    )
    return 0


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    seeds = _int_list(args.seeds) if args.seeds else [cfg.seed]
    if not seeds:
        raise UsageError("--seeds is empty")
    out = _out_dir(args)
    rows, finals = [], []
    for s in seeds:
        for method in ("capt", "baseline"):
            sim = run_experiment(cfg.with_overrides(seed=s, method=method))
            for entry in sim.logs:
                rows.append({"seed": s, "method": method, **entry.row()})
            finals.append({"seed": s, "method": method, **sim.logs[-1].metrics.as_dict()})
    write_csv(out / "compare.csv", ("seed", "method") + METRIC_FIELDS, rows)
    write_csv(out / "compare_final.csv", ("seed", "method", "overall", "head", "mid", "tail"), finals)
    for method in ("capt", "baseline"):
        sel = [f for f in finals if f["method"] == method]
        means = {k: _mean([f[k] for f in sel]) for k in ("overall", "head", "mid", "tail")}
        sys.stdout.write(f"{method:<9}" + " ".join(f"{k}={format_value(v)}" for k, v in means.items()) + "\n")
    return 0


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def diagnose_pairs(cfg: RunConfig, ratios=(10.0, 50.0, 100.0), num_seeds: int = 50) -> list[tuple[str, object]]:
    """Theory quantities at the trained server state plus a heterogeneity sweep over ``ratios``."""
    sim = run_experiment(cfg) if cfg.protocol.rounds > 0 else setup(cfg)
    clients = [(c.features, c.labels) for c in sim.clients]
    rep = bound_check(
        clients, sim.encoders, sim.server.prompts, sim.server.prior, cfg.model.tau, sim.lam, sim.partition
    )
    pairs: list[tuple[str, object]] = [
        ("method", cfg.method),
        ("seed", cfg.seed),
        ("rounds", len(sim.logs)),
        ("total_variance", rep.total_variance),
        ("within_mean", rep.within_mean),
        ("between", rep.between),
        ("identity_gap", rep.identity_gap),
        ("identity_holds", rep.identity_gap <= 1e-6),
        ("G_hat", rep.G_hat),
        ("delta_pi2", rep.delta_pi2),
        ("bound", rep.bound),
        ("bound_holds", rep.bound_holds),
        ("loose_bound", rep.loose_bound),
        ("loose_bound_holds", rep.loose_bound_holds),
    ]
    d = cfg.dataset
    means = []
    for rho in ratios:
        counts = ds.longtail_counts(ds.LongTailSpec(d.num_classes, max(d.n_max, int(np.ceil(rho))), rho))
        vals = [
            delta_pi_sq(
                ds.dirichlet_partition(
                    counts, d.num_clients, d.alpha_dir, derive_seed(s, PARTITION), min_client_size=d.min_client_size
                )
            )
            for s in range(num_seeds)
        ]
        means.append(float(np.mean(vals)))
        pairs.append((f"mean_delta_pi2_rho_{rho:g}", means[-1]))
    pairs.append(("delta_pi2_increasing", bool(all(a < b for a, b in zip(means, means[1:])))))
    return pairs


def cmd_diagnose(args) -> int:
    cfg = resolve_config(args)
    ratios = _float_list(args.ratios)
    if not ratios or any(r < 1 for r in ratios):
        raise UsageError("--ratios needs values >= 1")
    out = _out_dir(args)
    pairs = diagnose_pairs(cfg, ratios, args.num_seeds)
    write_csv(out / "diagnose.csv", ("quantity", "value"), [{"quantity": k, "value": v} for k, v in pairs])
    report = _summary_lines(pairs)
    (out / "diagnose.txt").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    alphas, ratios = _float_list(args.alphas), _float_list(args.ratios)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not alphas or not ratios or not methods:
        raise UsageError("sweep needs non-empty --alphas, --ratios and --methods")
    out = _out_dir(args)
    cells = []
    for a in alphas:
        for rho in ratios:
            for method in methods:
                cell = cfg.with_overrides(
                    dataset__alpha_dir=a,
                    dataset__imbalance_ratio=rho,
                    dataset__n_max=max(cfg.dataset.n_max, int(np.ceil(rho))),
                    method=method,
                )
                name = f"alpha{a:g}_rho{rho:g}_{method}.csv"
                sim = run_experiment(cell)
                emit_metrics([e.row() for e in sim.logs], out / name)
                cells.append({"file": name, "alpha_dir": a, "imbalance_ratio": rho, "method": method,
                              **sim.logs[-1].metrics.as_dict()})
    write_csv(
        out / "index.csv",
        ("file", "alpha_dir", "imbalance_ratio", "method", "overall", "head", "mid", "tail"),
        cells,
    )
    sys.stdout.write(f"{len(cells)} cells written to {out}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML file with dotted keys")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", default="captsim-out", help="output directory")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)"
    )
    parser = argparse.ArgumentParser(prog="captsim", description="Federated long-tail prompt-tuning simulator.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    sub.add_parser("partition", parents=[common], help="write a client partition and its skew")
    sub.add_parser("train", parents=[common], help="run one method, write metrics and a checkpoint")
    p = sub.add_parser("compare", parents=[common], help="paired runs of both methods")
    p.add_argument("--seeds", metavar="LIST", help="comma-separated seeds (default: the config seed)")
    p = sub.add_parser("diagnose", parents=[common], help="gradient-variance report")
    p.add_argument("--ratios", default="10,50,100", metavar="LIST")
    p.add_argument("--num-seeds", type=int, default=50, metavar="N")
    p = sub.add_parser("sweep", parents=[common], help="grid over concentration, imbalance and method")
    p.add_argument("--alphas", default="0.05,0.1,0.5", metavar="LIST")
    p.add_argument("--ratios", default="10,50,100", metavar="LIST")
    p.add_argument("--methods", default="capt,baseline", metavar="LIST")
    return parser


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "compare": cmd_compare,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse has already printed usage to stderr
        return 0 if exc.code == 0 else 2
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ds.InvalidSpecError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"captsim: error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"captsim: {type(exc).__name__}: {exc}\n")
        return 1


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command())


if __name__ == "__main__":
    main()
