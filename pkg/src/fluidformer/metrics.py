"""Evaluation metrics: Chamfer distance, EMD, n-frame sequence error, maximum density error.

Distances are returned in millimeters and densities in g/cm^3.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .geometry import REST_DENSITY, particle_mass

MM = 1000.0
EXACT_EMD_LIMIT = 512

UNITS = {"cd": "mm", "emd": "mm", "emd_sinkhorn": "mm", "nse": "mm", "mde": "g/cm^3"}


def _points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError(f"{name} is empty")
    return a


def chamfer(a, b) -> float:
    """Symmetric average nearest-neighbor distance in mm."""
    a, b = _points(a, "A"), _points(b, "B")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()) * MM)


@dataclass
class EmdResult:
    value: float        # mm
    exact: bool

    @property
    def mode(self) -> str:
        return "exact" if self.exact else "sinkhorn"


def _cost(a, b) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d * d).sum(axis=-1))


def emd_report(a, b, exact_limit: int = EXACT_EMD_LIMIT, eps_final: float = 1e-4,
               iters: int = 200) -> EmdResult:
    """Mean transport distance of the optimal one-to-one matching.

    Uses the Hungarian solver up to ``exact_limit`` points and an entropic
    approximation (log-domain Sinkhorn with a decreasing temperature) above it.
    """
    a, b = _points(a, "A"), _points(b, "B")
    if len(a) != len(b):
        raise ValueError(f"emd needs equal set sizes, got {len(a)} and {len(b)}")
    c = _cost(a, b)
    if len(a) <= exact_limit:
        rows, cols = linear_sum_assignment(c)
        return EmdResult(float(c[rows, cols].mean() * MM), True)
    return EmdResult(float(_sinkhorn(c, eps_final, iters) * MM), False)


def emd(a, b, exact_limit: int = EXACT_EMD_LIMIT) -> float:
    return emd_report(a, b, exact_limit).value


def _sinkhorn(c: np.ndarray, eps_final: float, iters: int) -> float:
    n = len(c)
    log_mu = np.full(n, -np.log(n))
    f = np.zeros(n)
    g = np.zeros(n)
    eps = max(float(c.max()), eps_final)
    while True:
        for _ in range(iters):
            f = eps * (log_mu - logsumexp((g[None, :] - c) / eps, axis=1))
            g = eps * (log_mu - logsumexp((f[:, None] - c) / eps, axis=0))
        if eps <= eps_final:
            break
        eps = max(eps * 0.5, eps_final)
    plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    return float((plan * c).sum() / plan.sum())


def sequence_error(pred_frames, true_frames, n: int) -> float:
    """Sum over frames 1..n of the mean per-particle distance, identity matched, in mm.

    Frame 0 is the shared initial state and is not counted.
    """
    if len(pred_frames) != len(true_frames):
        raise ValueError("predicted and true sequences differ in length")
    if n < 0 or n > len(true_frames) - 1:
        raise ValueError(f"n={n} exceeds the {len(true_frames) - 1} available frames")
    total = 0.0
    for t in range(1, n + 1):
        p = np.asarray(pred_frames[t], dtype=np.float64).reshape(-1, 3)
        q = np.asarray(true_frames[t], dtype=np.float64).reshape(-1, 3)
        if p.shape != q.shape:
            raise ValueError(f"frame {t}: particle counts differ")
        total += np.linalg.norm(p - q, axis=1).mean()
    return float(total * MM)


# --------------------------------------------------------------------------- density

def cubic_spline(r, h: float) -> np.ndarray:
    """Cubic spline kernel with compact support ``h`` (normalized in 3-D)."""
    q = np.asarray(r, dtype=np.float64) / h
    sigma = 8.0 / (np.pi * h ** 3)
    w = np.where(q <= 0.5, 6.0 * (q ** 3 - q ** 2) + 1.0, 2.0 * np.clip(1.0 - q, 0.0, None) ** 3)
    return sigma * np.where(q <= 1.0, w, 0.0)


@lru_cache(maxsize=None)
def lattice_density(spacing: float) -> float:
    """Raw density of an interior particle of an infinite cubic rest lattice."""
    h_cm = 2.0 * spacing * 100.0
    s_cm = spacing * 100.0
    k = np.arange(-2, 3)
    g = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3) * s_cm
    return float(particle_mass(spacing) * cubic_spline(np.linalg.norm(g, axis=1), h_cm).sum())


def densities(positions, spacing: float) -> np.ndarray:
    """Calibrated SPH densities (g/cm^3); a bulk rest lattice gives the rest density."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3) * 100.0   # cm
    h = 2.0 * spacing * 100.0
    tree = cKDTree(x)
    pairs = tree.query_pairs(h, output_type="ndarray")
    w0 = cubic_spline(0.0, h)
    raw = np.full(len(x), w0)
    if len(pairs):
        w = cubic_spline(np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1), h)
        np.add.at(raw, pairs[:, 0], w)
        np.add.at(raw, pairs[:, 1], w)
    raw *= particle_mass(spacing)
    return raw * (REST_DENSITY / lattice_density(spacing))


def max_density_error(positions, spacing: float) -> float:
    """``max_i max(0, rho_i - rho_0)`` in g/cm^3."""
    rho = densities(positions, spacing)
    if len(rho) == 0:
        raise ValueError("no fluid particles")
    return float(max(0.0, (rho - REST_DENSITY).max()))


# --------------------------------------------------------------------------- reports

METRICS = ("cd", "emd", "nse", "mde")


def evaluate_sequences(pred_frames, true_frames, spacing: float, metrics=METRICS) -> list[tuple]:
    """Rows ``(metric, frame, value, units)`` comparing two identity-matched sequences.

    CD, EMD and MDE are per frame (MDE on the prediction); n-SE is reported for
    every prefix length n.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if len(pred_frames) != len(true_frames):
        raise ValueError("sequences differ in length")
    rows = []
    for t, (p, q) in enumerate(zip(pred_frames, true_frames)):
        if "cd" in metrics:
            rows.append(("cd", t, chamfer(p, q), UNITS["cd"]))
        if "emd" in metrics:
            r = emd_report(p, q)
            name = "emd" if r.exact else "emd_sinkhorn"
            rows.append((name, t, r.value, UNITS[name]))
        if "mde" in metrics:
            rows.append(("mde", t, max_density_error(p, spacing), UNITS["mde"]))
    if "nse" in metrics:
        for n in range(1, len(true_frames)):
            rows.append(("nse", n, sequence_error(pred_frames, true_frames, n), UNITS["nse"]))
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "frame", "value", "units"])
        for m, f, v, u in rows:
            w.writerow([m, f, repr(float(v)), u])
