"""Waveform similarity metrics, blood-pressure extraction and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.signal import find_peaks

from .signal import SAMPLE_RATE, SignalSegment, derive_seed, mask_ppg

__all__ = [
    "rmse",
    "prd",
    "frechet",
    "frechet_bruteforce",
    "extract_sbp_dbp",
    "UnreadableWaveform",
    "MetricsReport",
    "evaluate",
    "write_report_csv",
    "write_report_json",
    "REPORT_COLUMNS",
]


class UnreadableWaveform(ValueError):
    """No beat could be located in an ABP segment."""


def _pair(S, S_hat) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=np.float64).ravel()
    S_hat = np.asarray(S_hat, dtype=np.float64).ravel()
    if S.shape != S_hat.shape:
        raise ValueError(f"length mismatch: {S.size} vs {S_hat.size}")
    if S.size == 0:
        raise ValueError("sequences must be non-empty")
    return S, S_hat


def rmse(S, S_hat) -> float:
    S, S_hat = _pair(S, S_hat)
    return float(np.sqrt(np.mean((S - S_hat) ** 2)))


def prd(S, S_hat, conventional: bool = False) -> float:
    """Percentage root-mean-square difference.

    By default the factor 100 sits inside the square root,
    ``sqrt(100 * sum((S - S_hat)^2) / sum(S^2))``. ``conventional=True``
    gives the usual ``100 * sqrt(ratio)`` instead.
    """
    S, S_hat = _pair(S, S_hat)
    energy = float(np.sum(S**2))
    if energy == 0.0:
        raise ValueError("PRD undefined for an all-zero reference")
    ratio = float(np.sum((S - S_hat) ** 2)) / energy
    return float(100.0 * np.sqrt(ratio)) if conventional else float(np.sqrt(100.0 * ratio))


@njit(cache=True)
def _frechet_dp(a, b, squared):
    p, q = a.shape[0], b.shape[0]
    prev = np.empty(q)
    cur = np.empty(q)
    for i in range(p):
        for j in range(q):
            c = a[i] - b[j]
            c = c * c if squared else abs(c)
            if i == 0 and j == 0:
                best = c
            elif i == 0:
                best = max(cur[j - 1], c)
            elif j == 0:
                best = max(prev[0], c)
            else:
                best = max(min(prev[j], cur[j - 1], prev[j - 1]), c)
            cur[j] = best
        prev, cur = cur, prev
    return prev[q - 1]


def frechet(S, S_hat, squared: bool = True) -> float:
    """Discrete Fréchet distance between two scalar sequences.

    The coupling cost is ``(s - s_hat)**2`` by default; ``squared=False``
    gives the conventional absolute-difference form.

    >>> frechet([0, 1], [0, 3])
    4.0
    """
    a = np.asarray(S, dtype=np.float64).ravel()
    b = np.asarray(S_hat, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("Fréchet distance needs non-empty sequences")
    return float(_frechet_dp(a, b, squared))


def frechet_bruteforce(S, S_hat, squared: bool = True, max_len: int = 10) -> float:
    """Enumerate every monotone coupling explicitly; exponential, for checking only."""
    a = [float(v) for v in np.asarray(S, dtype=np.float64).ravel()]
    b = [float(v) for v in np.asarray(S_hat, dtype=np.float64).ravel()]
    if not a or not b:
        raise ValueError("Fréchet distance needs non-empty sequences")
    if len(a) > max_len or len(b) > max_len:
        raise ValueError(f"brute force limited to length {max_len}, got {len(a)} and {len(b)}")
    p, q = len(a), len(b)
    cost = [[(x - y) ** 2 if squared else abs(x - y) for y in b] for x in a]
    best = float("inf")
    # each stack entry is one partial coupling: (i, j, max cost so far)
    stack = [(0, 0, cost[0][0])]
    while stack:
        i, j, worst = stack.pop()
        if i == p - 1 and j == q - 1:
            best = min(best, worst)
            continue
        if i + 1 < p:
            stack.append((i + 1, j, max(worst, cost[i + 1][j])))
        if j + 1 < q:
            stack.append((i, j + 1, max(worst, cost[i][j + 1])))
        if i + 1 < p and j + 1 < q:
            stack.append((i + 1, j + 1, max(worst, cost[i + 1][j + 1])))
    return best


def extract_sbp_dbp(abp, sample_rate: float = SAMPLE_RATE, prominence: float = 0.25,
                    min_spacing: float = 0.33) -> tuple[float, float]:
    """Mean beat maximum and mean inter-beat minimum of an ABP waveform."""
    x = abp.samples if isinstance(abp, SignalSegment) else np.asarray(abp, dtype=np.float64)
    span = float(np.ptp(x))
    if span <= 0:
        raise UnreadableWaveform("flat waveform has no beats")
    peaks, _ = find_peaks(x, prominence=prominence * span,
                          distance=max(1, int(np.ceil(min_spacing * sample_rate))))
    if peaks.size == 0:
        raise UnreadableWaveform("no qualifying systolic peaks")
    sbp = float(x[peaks].mean())
    if peaks.size >= 2:
        dbp = float(np.mean([x[a:b].min() for a, b in zip(peaks[:-1], peaks[1:])]))
    else:
        dbp = float(x.min())
    return sbp, dbp


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

REPORT_COLUMNS = ["mask_ratio", "count", "rmse_mean", "rmse_std", "prd_mean", "prd_std",
                  "fd_mean", "fd_std"]
DOWNSTREAM_COLUMNS = ["sbp_mae", "sbp_me", "sbp_sd", "dbp_mae", "dbp_me", "dbp_sd", "bp_failures"]


@dataclass
class MetricsReport:
    mask_ratio: float
    ids: list[str]
    rmse: np.ndarray
    prd: np.ndarray
    fd: np.ndarray
    downstream: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.ids)

    def summary(self) -> dict:
        out = {"mask_ratio": self.mask_ratio, "count": self.count}
        for name in ("rmse", "prd", "fd"):
            v = getattr(self, name)
            out[f"{name}_mean"] = float(np.mean(v))
            out[f"{name}_std"] = float(np.std(v))
        out.update(self.downstream)
        return out

    def to_json(self) -> dict:
        doc = self.summary()
        doc["segments"] = [{"id": i, "rmse": float(r), "prd": float(p), "fd": float(f)}
                           for i, r, p, f in zip(self.ids, self.rmse, self.prd, self.fd)]
        return doc


def _downstream(pred: np.ndarray, truth: Sequence[tuple[float, float]]) -> dict:
    errs = []
    failures = 0
    for y, (sbp_t, dbp_t) in zip(pred, truth):
        try:
            sbp, dbp = extract_sbp_dbp(y)
        except UnreadableWaveform:
            failures += 1
            continue
        errs.append((sbp - sbp_t, dbp - dbp_t))
    out = {"bp_failures": failures}
    e = np.array(errs).reshape(-1, 2)
    for k, name in enumerate(("sbp", "dbp")):
        col = e[:, k]
        out[f"{name}_mae"] = float(np.abs(col).mean()) if col.size else float("nan")
        out[f"{name}_me"] = float(col.mean()) if col.size else float("nan")
        out[f"{name}_sd"] = float(col.std()) if col.size else float("nan")
    return out


def evaluate(predict: Callable[[np.ndarray], np.ndarray], ppg: np.ndarray, abp: np.ndarray,
             ids: Sequence[str], mask_ratios: Sequence[float], seed: int = 0,
             bp_truth: Sequence[tuple[float, float]] | None = None,
             downstream: bool = False) -> list[MetricsReport]:
    """Mask every PPG input at each ratio, predict ABP and score it against ``abp``.

    ``predict`` maps a masked PPG batch ``(b, N)`` to ABP ``(b, N)`` in the
    units of ``abp``. Masks are seeded per (seed, ratio, segment id).
    """
    ppg = np.atleast_2d(ppg)
    abp = np.atleast_2d(abp)
    ids = list(ids)
    reports = []
    for mr in mask_ratios:
        masked = np.stack([mask_ppg(x, mr, derive_seed(seed, "eval", f"{mr:.6f}", sid))
                           for x, sid in zip(ppg, ids)])
        pred = np.asarray(predict(masked), dtype=np.float64)
        r = np.array([rmse(a, b) for a, b in zip(abp, pred)])
        p = np.array([prd(a, b) for a, b in zip(abp, pred)])
        f = np.array([frechet(a, b) for a, b in zip(abp, pred)])
        extra = {}
        if downstream:
            truth = bp_truth if bp_truth is not None else [extract_sbp_dbp(a) for a in abp]
            extra = _downstream(pred, truth)
        reports.append(MetricsReport(float(mr), ids, r, p, f, extra))
    return reports


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def report_csv_text(reports: Sequence[MetricsReport]) -> str:
    cols = list(REPORT_COLUMNS)
    if reports and reports[0].downstream:
        cols += DOWNSTREAM_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rep in reports:
        s = rep.summary()
        w.writerow([_fmt(s[c]) for c in cols])
    return buf.getvalue()


def write_report_csv(reports: Sequence[MetricsReport], path) -> None:
    Path(path).write_text(report_csv_text(reports))


def write_report_json(reports: Sequence[MetricsReport], path, extra: dict | None = None) -> None:
    doc = {"reports": [r.to_json() for r in reports]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
