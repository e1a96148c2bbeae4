"""Command line entry point: ``stateadapt {simulate,serve,bench,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import dataclass

from .config import build, parse_kv
from .errors import ConfigError
from .sim.strategies import REPORT_COLUMNS, STRATEGIES, SuiteConfig, run_bench
from .store import NoiseSpec, StateStore, StorePolicy

log = logging.getLogger("stateadapt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SIMULATE_REQUIRED = ("strategies", "target_accuracy")
BENCH_SEEDS = 5


@dataclass
class ServeConfig:
    capacity: int = 256
    decay_factor: float = 0.9
    noise_sigma: float = 0.0
    noise_clamp: float = 1.0
    max_inflight: int = 64
    regimes: int = 2
    seed: int = 0
    tokens: str = ""  # comma-separated token:org_tag pairs

    def token_map(self):
        out = {}
        for item in filter(None, (t.strip() for t in self.tokens.split(","))):
            tok, sep, tag = item.partition(":")
            if not sep or not tok or not tag:
                raise ConfigError(f"bad token entry {item!r}; expected token:org_tag", key="tokens")
            out[tok] = tag
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _read_config(path, cls, required=(), overrides=None):
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    entries = parse_kv(text)
    for key, value in (overrides or {}).items():
        if value is not None:
            entries[key] = (str(value), 0)
    return build(cls, entries, required=required)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _summary(report, wall):
    # wall time is reported here only; it never feeds a decision or the CSV
    return f"{report.summary()}\nwall_seconds {wall:.1f}\n"


def cmd_simulate(args):
    cfg = _read_config(args.config, SuiteConfig, SIMULATE_REQUIRED, {"seed": args.seed})
    logs = {}
    t0 = time.perf_counter()
    report = run_bench(cfg, store_root=args.store, logs=logs)
    out = args.out or "."
    _write(os.path.join(out, "report.csv"), report.to_csv())
    _write(os.path.join(out, "summary.txt"), _summary(report, time.perf_counter() - t0))
    for (seed, strat, env_id), text in sorted(logs.items()):
        _write(os.path.join(out, "rounds", f"{seed}-{strat}-{env_id}.csv"), text)
    print(report.summary())
    return EXIT_OK


def cmd_bench(args):
    overrides = {"seed": args.seed}
    cfg = _read_config(args.config, SuiteConfig, (), overrides)
    seeds = [cfg.seed + i for i in range(args.seeds or BENCH_SEEDS)]
    workers = args.workers or (cfg.workers if cfg.workers > 1 else min(4, os.cpu_count() or 1))
    t0 = time.perf_counter()
    report = run_bench(cfg, seeds=seeds, workers=workers, store_root=args.store)
    csv_text = report.to_csv()
    if args.out:
        _write(os.path.join(args.out, "bench.csv"), csv_text)
        _write(os.path.join(args.out, "summary.txt"), _summary(report, time.perf_counter() - t0))
        print(report.summary())
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def _store_dirs(root):
    if os.path.isfile(os.path.join(root, "index.txt")):
        return [root]
    subs = sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.isfile(os.path.join(root, d, "index.txt")))
    return subs or [root]


def cmd_inspect(args):
    if not args.store:
        raise ConfigError("inspect needs --store DIR", key="store")
    if not os.path.isdir(args.store):
        raise FileNotFoundError(f"no store at {args.store}")
    lines = []
    for d in _store_dirs(args.store):
        store = StateStore(root=d)
        entries = store.entries()
        lines.append(f"# store {d}: {len(entries)} entries, {store.store_bytes()} bytes")
        lines.append("key,env_id,version,org_tag,accuracy,decayed_freq,last_access,"
                     "medoid_cluster,n_samples,dim,blob_bytes")
        for e in entries:
            lines.append(f"{e.key},{e.env_id},{e.version},{e.org_tag},{e.accuracy!r},"
                         f"{e.decayed_freq!r},{e.last_access!r},{e.medoid_cluster},"
                         f"{len(e.samples)},{e.samples.dim},{e.blob_size}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(os.path.join(args.out, "inspect.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_listen(addr):
    host, sep, port = (addr or "127.0.0.1:7321").rpartition(":")
    if not sep:
        host, port = "127.0.0.1", addr
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad --listen address {addr!r}; expected HOST:PORT",
                          key="listen") from None


def cmd_serve(args):
    from .service import ServiceConfig, serve

    cfg = _read_config(args.config, ServeConfig, (), {"seed": args.seed})
    host, port = _parse_listen(args.listen)
    noise = NoiseSpec(cfg.noise_sigma, cfg.noise_clamp) if cfg.noise_sigma > 0 else None
    policy = StorePolicy(capacity=cfg.capacity, decay_factor=cfg.decay_factor, noise=noise,
                         seed=cfg.seed)
    store = StateStore(policy, root=args.store)
    handle = serve(store, ServiceConfig(host=host, port=port, tokens=cfg.token_map(),
                                        max_inflight=cfg.max_inflight, regimes=cfg.regimes))
    h, p = handle.address
    print(f"serving {len(store)} entries on {h}:{p}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    handle.close()
    print("stopped", flush=True)
    return EXIT_OK


BENCH_EPILOG = ("CSV columns, in order: " + ",".join(REPORT_COLUMNS) +
                ". Strategies: " + ",".join(STRATEGIES) + ".")


def build_parser():
    p = _Parser(prog="stateadapt", description="Adaptive model reuse across drifting "
                "environment states: simulation, benchmark and repository service.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="flat key=value file")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--store", metavar="DIR", help="repository root")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--listen", metavar="ADDR", help="HOST:PORT (serve only)")
        return sp

    s = common(sub.add_parser("simulate", help="run a suite from a config file"))
    s.set_defaults(func=cmd_simulate)
    s = common(sub.add_parser("serve", help="start the repository service"))
    s.set_defaults(func=cmd_serve)
    s = common(sub.add_parser("bench", help="run the benchmark matrix and emit CSV",
                              epilog=BENCH_EPILOG))
    s.add_argument("--seeds", type=int, metavar="K", help=f"seed count (default {BENCH_SEEDS})")
    s.add_argument("--workers", type=int, metavar="W", help="parallel cells (default min(4, cpus))")
    s.set_defaults(func=cmd_bench)
    s = common(sub.add_parser("inspect", help="dump repository contents"))
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
