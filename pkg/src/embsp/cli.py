"""Command-line harness.

``embsp [flags]`` runs one application and prints a verification line, the
elapsed time and a tab-separated counter table.  ``embsp predict [flags]``
prints the analytical predictions for the configuration instead.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import apps, costmodel
from .config import ConfigError, SimConfig, build_parser, config_from_namespace
from .runtime import Runtime, VpFailure

log = logging.getLogger("embsp")

RULE = "-" * 8


def default_n(app: str, v: int) -> int:
    if app == "alltoall":
        return 64 * v * v
    return 1024 * v


def needed_mu(app: str, n: int, v: int, B: int) -> int:
    """Context size that comfortably holds the app's working set."""
    if app == "psrs":
        return apps.psrs_mu(n, v, B)
    if app == "psum":
        need = (n // v) * 8 + 3 * v * 8
    elif app == "alltoall":
        need = 2 * (n // v) * 4 + 2 * B
    else:
        need = 2 * max(1, n // v) * v * 8 + 4 * B
    return -(-need // B) * B


def _split_mode(argv: Sequence[str]) -> Tuple[str, List[str]]:
    argv = list(argv)
    if argv and argv[0] == "predict":
        return "predict", argv[1:]
    return "run", argv


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


# ---------------------------------------------------------------- verify

def verify(app: str, cfg: SimConfig, n: int, seed: int, rt: Runtime, results) -> Tuple[bool, str]:
    v = cfg.v
    rhos = [rt.rho(t) for t in range(cfg.nlocal)]
    if app == "psrs":
        oracle = apps.psrs_oracle(n, v, seed)
        parts = [r.data for r in results]
        if cfg.P == 1:
            ok = np.array_equal(np.concatenate(parts), oracle)
            return ok, "output equals sequential sort" if ok else "output differs from sequential sort"
        for p in parts:
            if len(p) == 0:
                continue
            lo = int(np.searchsorted(oracle, p[0], "left"))
            hi = int(np.searchsorted(oracle, p[-1], "right"))
            if hi - lo != len(p) or not np.array_equal(oracle[lo:hi], p):
                return False, "a local bucket differs from the sorted oracle"
        return True, "local buckets equal their slices of the sorted oracle"
    if app == "psum":
        oracle = apps.psum_oracle(n, v, seed)
        m = n // v
        ok = all(np.array_equal(r, oracle[rho * m:(rho + 1) * m]) for rho, r in zip(rhos, results))
        return ok, "prefix sums equal running total" if ok else "prefix sums differ"
    if app == "alltoall":
        ok = all(r["ok"] for r in results)
        return ok, "all received blocks correct" if ok else "received blocks differ"
    # collectives: compare against an in-memory single-rank reference
    ref_cfg = cfg.with_(P=1, rank=0, hosts=(), driver="in-memory", layout=None, alpha=None,
                        sigma=None, disk_paths=(), strict_accounting=False, bench=False)
    ref, _ = apps.run_collectives(ref_cfg, n, seed)
    ok = all(results[t] == ref[rho] for t, rho in enumerate(rhos))
    return ok, "collective results equal single-rank reference" if ok else "collective results differ"


def dump(app: str, out_dir: str, rt: Runtime, results) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for t, r in enumerate(results):
        rho = rt.rho(t)
        if app == "psrs":
            np.save(os.path.join(out_dir, f"vp{rho}.npy"), r.data)
        elif app == "psum":
            np.save(os.path.join(out_dir, f"vp{rho}.npy"), r)
        else:
            with open(os.path.join(out_dir, f"vp{rho}.json"), "w") as fh:
                json.dump({k: v for k, v in r.items() if k != "seconds"}, fh, sort_keys=True)


def counter_table(rt: Runtime) -> List[Tuple[str, object]]:
    rows: List[Tuple[str, object]] = list(rt.counters.snapshot().items())
    rows.append(("logical_total", rt.counters.total()))
    rows.append(("shared_buffer_high_water", rt.shared.high_water))
    rows.append(("backing_bytes", rt.vmem.backing_bytes()))
    for name, cnt in sorted(rt.net.ops.items()):
        rows.append((f"netop_{name}", cnt))
    rows.append(("netop_reduce_rounds", rt.net.reduce_rounds_total))
    return rows


def bench_path(path: str, cfg: SimConfig) -> str:
    if cfg.P == 1:
        return path
    root, ext = os.path.splitext(path)
    return f"{root}.rank{cfg.rank}{ext}"


# ------------------------------------------------------------------ main

def run_app(ns, cfg: SimConfig, out=None) -> int:
    out = sys.stdout if out is None else out
    app = ns.app
    n = ns.n if ns.n is not None else default_n(app, cfg.v)
    seed = cfg.seed
    runner = {
        "psrs": lambda rt: rt.run(apps.psrs_program, n, seed),
        "psum": lambda rt: rt.run(apps.prefix_sum_program, n, seed),
        "alltoall": lambda rt: rt.run(apps.alltoall_program, n, ns.indirect),
        "collectives": lambda rt: rt.run(apps.collectives_program, n, seed),
    }[app]
    with Runtime(cfg) as rt:
        try:
            results = runner(rt)
        except VpFailure as exc:
            print(f"verification: FAIL ({exc})", file=out)
            return 1
        ok, why = verify(app, cfg, n, seed, rt, results)
        rows = counter_table(rt)
        if ns.dump:
            dump(app, ns.dump, rt, results)
        written: List[str] = []
        if ns.bench_out:
            from .bench import write_report

            written = write_report(rt.bench, bench_path(ns.bench_out, cfg))
    print(f"app: {app}  n={n}  v={cfg.v}  P={cfg.P}  rank={cfg.rank}  k={cfg.k}  "
          f"mu={cfg.mu}  io={cfg.driver.value}", file=out)
    print(f"verification: {'PASS' if ok else 'FAIL'} ({why})", file=out)
    print(f"seconds: {rt.elapsed:.6f}", file=out)
    print(f"{RULE} counters {RULE}", file=out)
    print("counter\tvalue", file=out)
    for name, val in rows:
        print(f"{name}\t{val}", file=out)
    print(f"{RULE} end {RULE}", file=out)
    for path in written:
        print(f"wrote {path}", file=out)
    return 0 if ok else 1


def run_predict(ns, cfg: SimConfig, out=None) -> int:
    out = sys.stdout if out is None else out
    omega = ns.omega if ns.omega is not None else cfg.B
    print(f"{RULE} predictions {RULE}", file=out)
    print("quantity\tunit\tvalue", file=out)
    for name, unit, val in costmodel.predictions(cfg, omega, n=ns.n or 1):
        print(f"{name}\t{unit}\t{val:.6g}" if isinstance(val, float) else f"{name}\t{unit}\t{val}",
              file=out)
    print(f"{RULE} end {RULE}", file=out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    mode, rest = _split_mode(argv)
    parser = build_parser("embsp predict" if mode == "predict" else "embsp")
    if mode == "predict":
        parser.add_argument("--omega", type=int, default=None, help="message size bound in bytes")
    try:
        ns = parser.parse_args(rest)
        _setup_logging(ns.verbose)
        overrides: Dict[str, object] = {"bench": bool(ns.bench_out)}
        if mode == "run":
            v = ns.v if ns.v is not None else max(ns.P, 1)
            n = ns.n if ns.n is not None else default_n(ns.app, v)
            if ns.mu is None:
                overrides["mu"] = needed_mu(ns.app, n, v, ns.B)
            if ns.indirect:
                overrides["indirect_omega"] = (n // (v * v)) * 4
        cfg = config_from_namespace(ns, **overrides)
    except ConfigError as exc:
        print(f"embsp: configuration error: {exc}", file=sys.stderr)
        return 2
    if mode == "predict":
        return run_predict(ns, cfg)
    return run_app(ns, cfg)


if __name__ == "__main__":
    sys.exit(main())
