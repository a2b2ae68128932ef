"""Simulation and system parameters.

Every other module reads its parameters from a validated :class:`SimConfig`.
The config is frozen after construction; defaults that depend on other
fields (sigma, alpha, layout) are resolved in ``__post_init__``.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple


class ConfigError(ValueError):
    """Raised for invalid parameters. ``violations`` lists every broken rule."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DriverKind(str, Enum):
    EXPLICIT_SYNC = "explicit-sync"
    ASYNC_QUEUED = "async-queued"
    MEMORY_MAPPED = "memory-mapped"
    IN_MEMORY = "in-memory"

    @property
    def explicit(self) -> bool:
        """True for drivers that require block-aligned requests."""
        return self is not DriverKind.MEMORY_MAPPED


class Layout(str, Enum):
    WHOLE = "whole-context-per-disk"
    STRIPED = "block-striped"


# short names used on the command line
IO_NAMES = {
    "unix": DriverKind.EXPLICIT_SYNC,
    "async": DriverKind.ASYNC_QUEUED,
    "mmap": DriverKind.MEMORY_MAPPED,
    "mem": DriverKind.IN_MEMORY,
}
LAYOUT_NAMES = {"whole": Layout.WHOLE, "striped": Layout.STRIPED}


@dataclass(frozen=True)
class CostParams:
    """Machine constants for the analytical predictors (seconds / bytes)."""

    G: float = 1e-4   # per delivery block
    S: float = 1e-4   # per swap block
    g: float = 1e-5   # per network packet of b bytes
    b: float = 4096.0
    l: float = 1e-4   # network superstep overhead
    L: float = 1e-3   # virtual superstep overhead

    @classmethod
    def parse(cls, text: str) -> "CostParams":
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) != 6:
            raise ConfigError(f"--cost expects 6 comma-separated values G,S,g,b,l,L, got {text!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"--cost has a non-numeric entry: {text!r}") from None
        return cls(*vals)


def default_sigma(P: int, v: int, k: int, mu: int, B: int) -> int:
    """Room for the boundary-block cache plus one partition's worth of staging."""
    return 2 * v * v * B // max(P, 1) + k * mu


@dataclass(frozen=True)
class SimConfig:
    P: int = 1
    v: int = 1
    k: int = 1
    mu: int = 4096 * 16
    D: int = 1
    B: int = 4096
    sigma: Optional[int] = None
    alpha: Optional[int] = None
    driver: DriverKind = DriverKind.EXPLICIT_SYNC
    layout: Optional[Layout] = None
    strict_accounting: bool = False
    # empty means "a private temporary directory per run"
    disk_paths: Tuple[str, ...] = ()
    rank: int = 0
    seed: int = 0
    hosts: Tuple[str, ...] = ()
    cost: CostParams = field(default_factory=CostParams)
    async_depth: int = 8
    # bytes per message slot of the indirect (baseline) area; 0 = not reserved
    indirect_omega: int = 0
    stay_resident: bool = False
    bench: bool = False

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "driver", DriverKind(self.driver))
        set_(self, "disk_paths", tuple(self.disk_paths))
        set_(self, "hosts", tuple(self.hosts))
        if self.layout is None:
            striped = self.k < self.D and self.driver is not DriverKind.MEMORY_MAPPED
            set_(self, "layout", Layout.STRIPED if striped else Layout.WHOLE)
        else:
            set_(self, "layout", Layout(self.layout))
        if self.alpha is None and self.P >= 1:
            set_(self, "alpha", max(1, self.v // self.P))
        if self.sigma is None:
            set_(self, "sigma", default_sigma(self.P, self.v, self.k, self.mu, self.B))
        if self.driver is DriverKind.MEMORY_MAPPED and self.cost.S != 0:
            set_(self, "cost", replace(self.cost, S=0.0))

    @property
    def nlocal(self) -> int:
        """Virtual processors hosted by each real processor (v/P)."""
        return self.v // self.P

    @property
    def blocks_per_context(self) -> int:
        return self.mu // self.B

    def ceil_block(self, n: int) -> int:
        return -(-n // self.B) * self.B

    def with_(self, **kw) -> "SimConfig":
        return validate(replace(self, **kw))


def violations(c: SimConfig) -> List[str]:
    out = []
    if c.P < 1:
        out.append(f"P must be >= 1 (got {c.P})")
    if c.v < max(c.P, 1):
        out.append(f"v must be >= P (got v={c.v}, P={c.P})")
    if c.P >= 1 and c.v % c.P:
        out.append(f"v not divisible by P (v={c.v}, P={c.P})")
    if c.P >= 1 and c.k > c.v // c.P:
        out.append(f"k exceeds v/P (k={c.k}, v/P={c.v // c.P})")
    if c.k < 1:
        out.append(f"k must be >= 1 (got {c.k})")
    if c.D < 1:
        out.append(f"D must be >= 1 (got {c.D})")
    if c.B < 1:
        out.append(f"B must be >= 1 (got {c.B})")
    if c.mu <= 0:
        out.append(f"mu must be positive (got {c.mu})")
    elif c.B >= 1 and c.mu % c.B:
        out.append(f"mu not a multiple of B (mu={c.mu}, B={c.B})")
    if c.alpha is None or c.alpha < 1:
        out.append(f"alpha must be >= 1 (got {c.alpha})")
    elif c.P > 1 and c.alpha >= c.v:
        out.append(f"alpha must be < v (alpha={c.alpha}, v={c.v})")
    if c.sigma is None or c.sigma < 0:
        out.append(f"sigma must be >= 0 (got {c.sigma})")
    if c.disk_paths and len(c.disk_paths) != c.D:
        out.append(f"disk_paths has {len(c.disk_paths)} entries, expected D={c.D}")
    if not 0 <= c.rank < max(c.P, 1):
        out.append(f"rank out of range 0..P-1 (rank={c.rank}, P={c.P})")
    if c.P > 1 and len(c.hosts) != c.P:
        out.append(f"hosts has {len(c.hosts)} entries, expected P={c.P}")
    if c.driver is DriverKind.MEMORY_MAPPED and c.layout is Layout.STRIPED:
        out.append("memory-mapped driver supports only the whole-context layout")
    if c.async_depth < 1:
        out.append(f"async_depth must be >= 1 (got {c.async_depth})")
    if c.indirect_omega < 0:
        out.append(f"indirect_omega must be >= 0 (got {c.indirect_omega})")
    if c.indirect_omega and c.P != 1:
        out.append("the indirect baseline area is only supported for P=1")
    cp = c.cost
    for name in ("G", "S", "g", "b", "l", "L"):
        if getattr(cp, name) < 0:
            out.append(f"cost {name} must be >= 0")
    if c.driver is DriverKind.MEMORY_MAPPED and cp.S != 0:
        out.append("cost S must be 0 for the memory-mapped driver")
    return out


def validate(raw: SimConfig) -> SimConfig:
    """Return ``raw`` unchanged if all invariants hold, else raise ConfigError."""
    bad = violations(raw)
    if bad:
        raise ConfigError(bad)
    return raw


# ---------------------------------------------------------------- CLI parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed integer {text!r}") from None


def add_sim_arguments(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulation")
    g.add_argument("--p", dest="P", type=_int, default=1, help="real processors")
    g.add_argument("--rank", type=_int, default=0, help="this process's rank")
    g.add_argument("--v", type=_int, default=None, help="virtual processors")
    g.add_argument("--k", type=_int, default=None, help="concurrent threads per rank")
    g.add_argument("--mu", type=_int, default=None, help="context size in bytes")
    g.add_argument("--disks", default=None, help="comma separated disk directories")
    g.add_argument("--block-size", dest="B", type=_int, default=4096)
    g.add_argument("--sigma", type=_int, default=None, help="shared buffer bytes")
    g.add_argument("--alpha", type=_int, default=None, help="network chunk size")
    g.add_argument("--io", choices=sorted(IO_NAMES), default="unix")
    g.add_argument("--layout", choices=sorted(LAYOUT_NAMES), default=None)
    g.add_argument("--strict-accounting", action="store_true")
    g.add_argument("--hosts", default=None, help="HOST:PORT list, one per rank")
    g.add_argument("--seed", type=_int, default=0)
    g.add_argument("--cost", default=None, help="G,S,g,b,l,L")
    g.add_argument("--async-depth", type=_int, default=8)
    g.add_argument("--stay-resident", action="store_true")


def add_app_arguments(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("application")
    g.add_argument("--app", choices=["psrs", "psum", "alltoall", "collectives"], default="psrs")
    g.add_argument("--n", type=_int, default=None, help="element count")
    g.add_argument("--bench-out", default=None, help="marker file (plus .png figure)")
    g.add_argument("--indirect", action="store_true",
                   help="alltoall app: use the indirect-area baseline")
    g.add_argument("--dump", default=None, help="directory for per-VP output arrays")
    g.add_argument("--verbose", "-V", action="count", default=0)


def build_parser(prog: str = "embsp", with_app: bool = True) -> argparse.ArgumentParser:
    p = _Parser(prog=prog, description="External-memory BSP runtime")
    add_sim_arguments(p)
    if with_app:
        add_app_arguments(p)
    return p


def config_from_namespace(ns: argparse.Namespace, **overrides) -> SimConfig:
    v = ns.v if ns.v is not None else max(ns.P, 1)
    k = ns.k if ns.k is not None else 1
    disks: Sequence[str] = tuple(d for d in (ns.disks or "").split(",") if d)
    D = len(disks) or 1
    kw = dict(
        P=ns.P, v=v, k=k, D=D, B=ns.B, sigma=ns.sigma, alpha=ns.alpha,
        driver=IO_NAMES[ns.io],
        layout=LAYOUT_NAMES[ns.layout] if ns.layout else None,
        strict_accounting=ns.strict_accounting, disk_paths=tuple(disks),
        rank=ns.rank, seed=ns.seed,
        hosts=tuple(h for h in (ns.hosts or "").split(",") if h),
        async_depth=ns.async_depth, stay_resident=ns.stay_resident,
    )
    if ns.mu is not None:
        kw["mu"] = ns.mu
    if ns.cost:
        kw["cost"] = CostParams.parse(ns.cost)
    kw.update(overrides)
    return validate(SimConfig(**kw))


def parse_cli(argv: Sequence[str]) -> SimConfig:
    """Map simulation flags onto a validated SimConfig. Application flags are accepted and ignored."""
    ns = build_parser().parse_args(list(argv))
    return config_from_namespace(ns)
