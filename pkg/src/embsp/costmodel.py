"""Analytical I/O-volume, buffer-space and run-time predictors.

Byte counts are computed with :class:`fractions.Fraction` and returned as
``int`` (they are integral on every valid input; a non-integral result
raises).  Times are floats in seconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Tuple

from .config import CostParams, SimConfig


def _exact(x: Fraction) -> int:
    if x.denominator != 1:
        raise ValueError(f"byte count {x} is not integral")
    return int(x)


def ceil_block(n: int, B: int) -> int:
    """Round ``n`` up to the next multiple of B."""
    return -(-n // B) * B


@dataclass(frozen=True)
class PredictionInput:
    v: int
    P: int = 1
    k: int = 1
    D: int = 1
    mu: int = 0
    omega: int = 0
    B: int = 4096
    b: float = 4096.0
    n: int = 1
    G: float = 0.0
    S: float = 0.0
    g: float = 0.0
    l: float = 0.0
    L: float = 0.0
    alpha: int = 1
    pi: int = 8
    epsilon: int = 4

    @classmethod
    def from_config(cls, cfg: SimConfig, omega: int, n: int = 1, epsilon: int = 4) -> "PredictionInput":
        c: CostParams = cfg.cost
        return cls(v=cfg.v, P=cfg.P, k=cfg.k, D=cfg.D, mu=cfg.mu, omega=omega, B=cfg.B,
                   b=c.b, n=n, G=c.G, S=c.S, g=c.g, l=c.l, L=c.L, alpha=cfg.alpha,
                   epsilon=epsilon)


# ------------------------------------------------------------ message counts

def direct_count(v: int, k: int, P: int = 1) -> int:
    """Local messages delivered in the first internal superstep, per rank.

    Round r of k threads delivers to the (r+1)k local threads that have
    already published their offsets.
    """
    n = v // P
    return _exact(Fraction(n * (n + k), 2))


def indirect_count(v: int, k: int, P: int = 1) -> int:
    n = v // P
    return n * n - direct_count(v, k, P)


# ---------------------------------------------------------------- I/O volume

def io_pems1_alltoallv(v: int, mu: int, omega: int) -> int:
    """Indirect-area baseline: 4vμ + 2v²ω."""
    return 4 * v * mu + 2 * v * v * omega


def io_pems1_delivery_baseline(v: int, mu: int, omega: int) -> int:
    """The 3vμ + 2v²ω baseline used for the improvement identity."""
    return 3 * v * mu + 2 * v * v * omega


def disk_pems1(v: int, mu: int, omega: int) -> int:
    return v * mu + v * v * omega


def disk_pems2(v: int, P: int, mu: int) -> int:
    """Backing storage per rank: vμ/P."""
    return _exact(Fraction(v * mu, P))


def io_alltoallv_seq(v: int, k: int, mu: int, omega: int, B: int) -> int:
    """vμ + ((v²−vk)/2)ω + 2v²B."""
    return _exact(v * mu + Fraction(v * v - v * k, 2) * omega + 2 * v * v * B)


def delta_vs_baseline(v: int, k: int, mu: int, omega: int, B: int) -> int:
    return io_pems1_delivery_baseline(v, mu, omega) - io_alltoallv_seq(v, k, mu, omega, B)


def improvement(v: int, k: int, mu: int, omega: int, B: int) -> int:
    """Closed form of :func:`delta_vs_baseline`: 2vμ + ((3v²+vk)/2)ω − 2v²B."""
    return _exact(2 * v * mu + Fraction(3 * v * v + v * k, 2) * omega - 2 * v * v * B)


def io_alltoallv_par_per_rank(v: int, P: int, k: int, mu: int, omega: int, B: int) -> Fraction:
    """Per-rank I/O of the multi-processor alltoallv.

    Swap-out of everything but R, local direct/indirect deliveries over v/P
    threads, one write per received remote message, and 2 boundary blocks
    per received message.  Sender-side staging reads are counted separately
    (:func:`io_alltoallv_par_stage`).
    """
    n = Fraction(v, P)
    return n * mu + (n * n / 2 - Fraction(k, 2) * n) * omega + 2 * n * v * B


def io_alltoallv_par(v: int, P: int, k: int, mu: int, omega: int, B: int) -> int:
    """Total over all ranks: vμ + (v²/(2P) − kv/2)ω + 2v²B.  Equals the
    sequential formula at P=1."""
    return _exact(P * io_alltoallv_par_per_rank(v, P, k, mu, omega, B))


def io_alltoallv_par_stage(v: int, P: int, omega: int) -> int:
    """Bytes read by senders to stage remote-bound messages (all ranks)."""
    return _exact(Fraction(v * v * (P - 1), P) * omega)


# ------------------------------------------------------------- buffer space

def buf_bcast(omega: int) -> int:
    return omega


def buf_gather(v: int, omega: int) -> int:
    return v * omega


def buf_reduce(k: int, n: int, epsilon: int) -> int:
    return k * n * epsilon


def buf_alltoallv_seq(v: int, P: int, B: int) -> int:
    return _exact(Fraction(2 * v * v * B, P))


def buf_alltoallv_par(v: int, P: int, B: int, alpha: int, k: int, omega: int) -> int:
    return buf_alltoallv_seq(v, P, B) + alpha * k * omega


# ------------------------------------------------------------------- times

def lg(P: int) -> float:
    return math.log2(P) if P > 1 else 0.0


def comm_time_alltoallv_par(p: PredictionInput) -> float:
    """g·αkω/b + l·v²/(Pkα)."""
    return p.g * p.alpha * p.k * p.omega / p.b + p.l * p.v * p.v / (p.P * p.k * p.alpha)


def network_relations_alltoallv_par(v: int, P: int, k: int, alpha: int) -> int:
    """Number of network exchanges: v²/(P²kα) when α divides v/P."""
    n = v // P
    rounds = -(-n // k)
    chunks = -(-n // alpha)
    return rounds * chunks


def time_bcast(p: PredictionInput) -> float:
    return (p.S * 2 * p.v * p.mu / (p.P * p.k * p.B)
            + p.G * p.v * p.omega / (p.P * p.D * p.B)
            + p.g * p.omega / p.b + p.l + p.L)


def time_gather(p: PredictionInput) -> float:
    return (p.S * (p.mu + p.omega) / (p.B * p.D)
            + p.g * p.v * p.omega / (p.P * p.b)
            + p.l * p.v / p.P + p.L)


def reduce_compute(n: int, v: int, P: int, k: int) -> Fraction:
    """nv/(Pk) + nk."""
    return Fraction(n * v, P * k) + n * k


def time_reduce(p: PredictionInput) -> float:
    lgp = lg(p.P)
    return (p.G * p.n * p.omega / p.B
            + p.g * p.n * p.omega * lgp / p.b + p.l * lgp + p.n * lgp
            + float(reduce_compute(p.n, p.v, p.P, p.k)) + p.L)


def time_alltoallv_seq(p: PredictionInput) -> float:
    v, k = p.v, p.k
    return (p.S * v * p.mu / (p.B * p.D)
            + p.G * (v * v - v * k) * p.omega / (2 * p.B * p.D)
            + p.G * 2 * v * v / p.D + p.L)


def time_alltoallv_par(p: PredictionInput) -> float:
    v, k, P = p.v, p.k, p.P
    msg = Fraction(v * v, 2 * P) - Fraction(k * v, 2)
    return (p.S * v * p.mu / (P * p.D * p.B)
            + p.G * float(msg) * p.omega / (P * p.D * p.B)
            + p.G * 2 * v * v / p.D
            + comm_time_alltoallv_par(p) + p.L)


def time_pems1_alltoallv(p: PredictionInput) -> float:
    """S·4μ/B + G·2v²⌈ω⌉/B + 2L (per virtual processor view of the baseline)."""
    return p.S * 4 * p.mu / p.B + p.G * 2 * p.v * p.v * ceil_block(p.omega, p.B) / p.B + 2 * p.L


# ------------------------------------------------------------------ table

def predictions(cfg: SimConfig, omega: int, n: int = 1, epsilon: int = 4) -> List[Tuple[str, str, float]]:
    """Rows of (quantity, unit, value) for the active configuration."""
    p = PredictionInput.from_config(cfg, omega, n=n, epsilon=epsilon)
    v, P, k, mu, B = cfg.v, cfg.P, cfg.k, cfg.mu, cfg.B
    rows: List[Tuple[str, str, float]] = [
        ("disk_per_rank", "bytes", disk_pems2(v, P, mu)),
        ("disk_total", "bytes", disk_pems2(v, P, mu) * P),
        ("disk_indirect_baseline", "bytes", disk_pems1(v, mu, omega)),
        ("io_indirect_baseline", "bytes", io_pems1_alltoallv(v, mu, omega)),
    ]
    if P == 1:
        rows += [
            ("io_alltoallv_seq", "bytes", io_alltoallv_seq(v, k, mu, omega, B)),
            ("improvement_vs_baseline", "bytes", delta_vs_baseline(v, k, mu, omega, B)),
            ("direct_msgs", "count", direct_count(v, k)),
            ("indirect_msgs", "count", indirect_count(v, k)),
        ]
    rows += [
        ("io_alltoallv_par", "bytes", io_alltoallv_par(v, P, k, mu, omega, B)),
        ("buf_alltoallv", "bytes", buf_alltoallv_par(v, P, B, cfg.alpha, k, omega) if P > 1
         else buf_alltoallv_seq(v, P, B)),
        ("buf_gather", "bytes", buf_gather(v, omega)),
        ("buf_reduce", "bytes", buf_reduce(k, n, epsilon)),
        ("time_bcast", "s", time_bcast(p)),
        ("time_gather", "s", time_gather(p)),
        ("time_reduce", "s", time_reduce(p)),
        ("time_alltoallv_seq", "s", time_alltoallv_seq(p)),
        ("time_alltoallv_par", "s", time_alltoallv_par(p)),
        ("time_indirect_baseline", "s", time_pems1_alltoallv(p)),
    ]
    return rows


def predictions_dict(cfg: SimConfig, omega: int, **kw) -> Dict[str, float]:
    return {name: val for name, _, val in predictions(cfg, omega, **kw)}
