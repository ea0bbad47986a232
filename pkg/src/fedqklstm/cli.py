"""Command-line entry points: ``fedqk <command> --config PATH ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import qkernel
from .config import ConfigError, ExperimentConfig, parse_int_list
from .data import save_dataset
from .federated.checkpoint import deserialize_checkpoint, serialize_checkpoint
from .federated.training import (
    RoundRecord,
    client_shards,
    evaluate,
    run_federated,
    train_centralized,
    write_metrics_csv,
)
from .federated.transport import TcpServer, parse_address, run_tcp_client
from .model import count_params, init_params
from .numerics import make_rng

log = logging.getLogger("fedqklstm")

GRID_HEADER = ["clients", "epochs", "round", "accuracy", "precision", "recall", "f1"]


# -----------------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    cfg = ExperimentConfig.load(args.config, overrides)
    if args.seed is not None:
        cfg.set("run.seed", str(args.seed))
    if args.out is not None:
        cfg.set("run.out", args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(str(cfg["run.out"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_common(cfg: ExperimentConfig, out: Path, params) -> None:
    (out / "config.resolved").write_text(cfg.resolved_text())
    (out / "final.fqkc").write_bytes(serialize_checkpoint(params))


def _print_table(table: dict[str, int], title: str) -> None:
    print(title)
    for name, count in table.items():
        if name != "total":
            print(f"  {name:<12}{count:>12,}")
    print(f"  {'total':<12}{table['total']:>12,}")


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train, test = cfg.prepare_data()
    mcfg = cfg.model_config(train)
    fed = cfg.fed_config()
    params, losses = train_centralized(
        train, mcfg, fed.rounds, fed.hyper, cfg.seed, fed.batch_size
    )
    report = evaluate(params, mcfg, test)
    out = _out_dir(cfg)
    records = [RoundRecord(i, None, None, None, None, loss) for i, loss in enumerate(losses)]
    last = records[-1]
    last.accuracy, last.precision, last.recall, last.f1 = (
        report.accuracy, report.precision, report.recall, report.f1
    )
    write_metrics_csv(records, out / "metrics.csv")
    _write_common(cfg, out, params)
    print(report.summary())
    return 0


def _run_fed(args, clients_factory) -> int:
    cfg = _load_config(args)
    train, test = cfg.prepare_data()
    mcfg = cfg.model_config(train)
    fed = cfg.fed_config()
    out = _out_dir(cfg)
    clients = clients_factory(cfg, train, fed, mcfg)
    records, params = run_federated(fed, mcfg, train, test, clients=clients,
                                    metrics_path=out / "metrics.csv")
    _write_common(cfg, out, params)
    final = records[-1]
    print(f"round {final.round_id}: accuracy={final.accuracy:.4f} f1={final.f1:.4f}")
    return 0


def cmd_fed_sim(args) -> int:
    return _run_fed(args, lambda cfg, train, fed, mcfg: None)


def cmd_fed_server(args) -> int:
    if not args.listen:
        raise ConfigError("fed-server needs --listen HOST:PORT")
    host, port = parse_address(args.listen)

    def factory(cfg, train, fed, mcfg):
        server = TcpServer(host, port, fed.clients)
        log.info("listening on %s:%d for %d clients", *server.address, fed.clients)
        return server

    return _run_fed(args, factory)


def cmd_fed_client(args) -> int:
    if not args.connect or args.client_id is None:
        raise ConfigError("fed-client needs --connect HOST:PORT and --client-id N")
    cfg = _load_config(args)
    train, _ = cfg.prepare_data()
    mcfg = cfg.model_config(train)
    fed = cfg.fed_config()
    if not 0 <= args.client_id < fed.clients:
        raise ConfigError(f"--client-id must be in [0, {fed.clients})")
    shard = client_shards(train, fed)[args.client_id]
    host, port = parse_address(args.connect)
    rounds = run_tcp_client(host, port, args.client_id, shard, fed, mcfg)
    print(f"client {args.client_id}: trained {rounds} rounds on {len(shard)} windows")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _, test = cfg.prepare_data()
    mcfg = cfg.model_config(test)
    path = Path(args.checkpoint or Path(str(cfg["run.out"])) / "final.fqkc")
    params = deserialize_checkpoint(path.read_bytes())
    expected = init_params(mcfg, 0)
    if not params.congruent(expected):
        raise ConfigError(
            f"checkpoint {path} does not match the configured model: "
            f"{params.shapes()} vs {expected.shapes()}"
        )
    report = evaluate(params, mcfg, test)
    print(report.summary())
    print("confusion (rows = true class):")
    for row in report.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    return 0


def cmd_count_params(args) -> int:
    cfg = _load_config(args)
    try:
        mcfg = cfg.model_config()
    except ConfigError:
        mcfg = cfg.model_config(cfg.load_dataset())
    kind = "classical LSTM" if mcfg.baseline else "QK-LSTM"
    _print_table(count_params(mcfg), f"trainable parameters ({kind})")
    if args.compare:
        other = type(mcfg)(**{**mcfg.__dict__, "baseline": not mcfg.baseline})
        kind = "classical LSTM" if other.baseline else "QK-LSTM"
        _print_table(count_params(other), f"trainable parameters ({kind})")
    return 0


def kernel_self_test(pairs: int = 1000, gram_size: int = 32, seed: int = 0) -> dict:
    """Closed-form vs statevector agreement and Gram PSD checks."""
    rng = make_rng(seed, "kernel-check")
    worst = 0.0
    for _ in range(pairs):
        dim = int(rng.integers(1, 17))
        cfg = qkernel.KernelConfig(dim, 4, 0)
        a, b = rng.uniform(-np.pi, np.pi, (2, dim))
        w = rng.uniform(0.1, 2.0, dim)
        sv = qkernel.kernel_value(a, b, w, cfg, method="statevector")
        cf = qkernel.kernel_value(a, b, w, cfg, method="closed_form")
        worst = max(worst, abs(sv - cf))
    min_eig = {}
    for depth in (0, 1):
        X = rng.normal(size=(gram_size, 8))
        G = qkernel.gram_matrix(X, np.ones(8), qkernel.KernelConfig(8, 4, depth))
        min_eig[depth] = float(np.linalg.eigvalsh(G).min())
    passed = worst <= 1e-10 and all(v >= -1e-8 for v in min_eig.values())
    return {"max_deviation": worst, "min_eigenvalue": min_eig, "passed": passed}


def cmd_kernel_check(args) -> int:
    result = kernel_self_test()
    print(f"max closed-form deviation: {result['max_deviation']:.3e}")
    for depth, value in result["min_eigenvalue"].items():
        print(f"gram min eigenvalue (depth {depth}): {value:.3e}")
    print("PASS" if result["passed"] else "FAIL")
    return 0 if result["passed"] else 1


def cmd_gen_synth(args) -> int:
    cfg = _load_config(args)
    cfg.set("data.source", "synthetic")
    dataset = cfg.load_dataset()
    out = _out_dir(cfg)
    path = out / "synthetic.fqkd"
    save_dataset(dataset, path)
    print(f"wrote {len(dataset)} windows to {path}")
    return 0


def run_grid(cfg: ExperimentConfig, clients: list[int], epochs: list[int], path) -> bool:
    """One federated run per (clients, epochs) cell, row-major; returns True if all succeeded."""
    if not clients or not epochs:
        raise ConfigError("grid needs non-empty client and epoch lists")
    train, test = cfg.prepare_data()
    mcfg = cfg.model_config(train)
    ok = True
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GRID_HEADER)
        for k in clients:
            for e in epochs:
                cell = ExperimentConfig(dict(cfg.values))
                cell.set("fed.clients", str(k))
                cell.set("fed.local_epochs", str(e))
                try:
                    records, _ = run_federated(cell.fed_config(), mcfg, train, test)
                except Exception as exc:  # recorded in the artifact, run continues
                    log.error("grid cell clients=%d epochs=%d failed: %s", k, e, exc)
                    writer.writerow([k, e, "", "", "", "", ""])
                    ok = False
                    continue
                for r in records:
                    writer.writerow([k, e, *r.csv_row()[:5]])
                fh.flush()
    return ok


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    clients = parse_int_list(args.clients or cfg["grid.clients"])
    epochs = parse_int_list(args.epochs or cfg["grid.epochs"])
    (out / "config.resolved").write_text(cfg.resolved_text())
    ok = run_grid(cfg, clients, epochs, out / "grid.csv")
    print(f"wrote {out / 'grid.csv'}")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "fed-sim": cmd_fed_sim,
    "fed-server": cmd_fed_server,
    "fed-client": cmd_fed_client,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "kernel-check": cmd_kernel_check,
    "gen-synth": cmd_gen_synth,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedqk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="overrides run.out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if name == "fed-server":
            p.add_argument("--listen", help="HOST:PORT")
        if name == "fed-client":
            p.add_argument("--connect", help="HOST:PORT")
            p.add_argument("--client-id", type=int)
        if name == "eval":
            p.add_argument("--checkpoint", help="defaults to <out>/final.fqkc")
        if name == "count-params":
            p.add_argument("--compare", action="store_true",
                           help="also print the other recurrent variant")
        if name == "grid":
            p.add_argument("--clients", help="comma-separated, overrides grid.clients")
            p.add_argument("--epochs", help="comma-separated, overrides grid.epochs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
