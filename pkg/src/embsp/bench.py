"""Per-thread elapsed-time markers and their report.

Each VP thread appends ``(label, seconds)`` pairs to its own list.  The
report has one column per marker and one row per thread.  A label that
repeats within a thread (``Finish Step 1`` recurs in every collective)
becomes a new column per occurrence, and columns keep the order in which
the threads passed them.
"""
from __future__ import annotations

import heapq
import logging
import os
import time
from typing import Dict, List, Optional, Sequence, Tuple

log = logging.getLogger(__name__)

Key = Tuple[str, int]  # (label, occurrence within a thread)


class BenchRecorder:
    def __init__(self, nthreads: int, enabled: bool = True):
        self.enabled = enabled
        self.rows: List[List[Tuple[str, float]]] = [[] for _ in range(nthreads)]
        self.t0 = time.perf_counter()

    def start(self) -> None:
        self.t0 = time.perf_counter()

    def mark(self, t: int, label: str) -> None:
        if self.enabled:
            self.rows[t].append((label, time.perf_counter() - self.t0))

    # ------------------------------------------------------------ report
    def _keyed(self) -> List[List[Tuple[Key, float]]]:
        out = []
        for row in self.rows:
            seen: Dict[str, int] = {}
            keyed = []
            for label, sec in row:
                n = seen.get(label, 0)
                seen[label] = n + 1
                keyed.append(((label, n), sec))
            out.append(keyed)
        return out

    def columns(self) -> List[Key]:
        """Merge the per-thread sequences, preserving each thread's order.

        A topological merge over "came right after" edges; ties go to the
        column reached earliest in time.
        """
        keyed = self._keyed()
        first_time: Dict[Key, float] = {}
        succ: Dict[Key, set] = {}
        indeg: Dict[Key, int] = {}
        for row in keyed:
            prev = None
            for key, sec in row:
                if key not in indeg:
                    indeg[key] = 0
                    succ[key] = set()
                first_time[key] = min(first_time.get(key, sec), sec)
                if prev is not None and key not in succ[prev]:
                    succ[prev].add(key)
                    indeg[key] += 1
                prev = key
        heap = [(first_time[k], k) for k, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order: List[Key] = []
        while heap:
            _, k = heapq.heappop(heap)
            order.append(k)
            for nxt in succ[k]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    heapq.heappush(heap, (first_time[nxt], nxt))
        if len(order) < len(indeg):
            # threads disagree on order; fall back to time order for the rest
            rest = sorted((k for k in indeg if k not in set(order)), key=lambda k: first_time[k])
            order += rest
        return order

    def table(self) -> Tuple[List[str], List[List[Optional[float]]]]:
        cols = self.columns()
        index = {k: i for i, k in enumerate(cols)}
        data = []
        for row in self._keyed():
            cells: List[Optional[float]] = [None] * len(cols)
            for key, sec in row:
                cells[index[key]] = sec
            data.append(cells)
        return [label for label, _ in cols], data

    def report(self, out_path: str) -> Optional[str]:
        """Write the marker table; returns the path, or None when disabled."""
        if not self.enabled:
            return None
        labels, data = self.table()
        with open(out_path, "w") as fh:
            fh.write("# " + " ".join(f'"{lab}"' for lab in labels) + "\n")
            # a missing marker is written as "-" (gnuplot: set datafile missing "-")
            for cells in data:
                fh.write(" ".join("-" if c is None else f"{c:.6f}" for c in cells) + "\n")
        return out_path


def read_report(path: str) -> Tuple[List[str], List[List[Optional[float]]]]:
    """Parse a file written by :meth:`BenchRecorder.report`."""
    import shlex

    with open(path) as fh:
        header = fh.readline()
        labels = shlex.split(header.lstrip("#").strip())
        rows = []
        for line in fh:
            if not line.strip():
                continue
            rows.append([None if tok == "-" else float(tok) for tok in line.split()])
    return labels, rows


def plot_report(labels: Sequence[str], rows: Sequence[Sequence[Optional[float]]],
                png_path: str, title: str = "Elapsed Time Per Thread") -> str:
    """Render one line per thread: elapsed seconds against marker position."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(labels) + 2), 4.8))
    xs = list(range(len(labels)))
    for i, row in enumerate(rows):
        pts = [(x, y) for x, y in zip(xs, row) if y is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", linewidth=1,
                    label=f"thread {i}")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=75, ha="right", fontsize=7)
    ax.set_xlabel("Algorithm Progress")
    ax.set_ylabel("Elapsed Time (s)")
    ax.set_title(title)
    if len(rows) <= 16:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def write_report(rec: BenchRecorder, out_path: str, png: bool = True) -> List[str]:
    """Marker file plus (optionally) a PNG next to it; returns written paths."""
    written = []
    if rec.report(out_path) is None:
        return written
    written.append(out_path)
    if png:
        labels, rows = rec.table()
        written.append(plot_report(labels, rows, os.path.splitext(out_path)[0] + ".png"))
    return written
