"""Per-pair rates, the weighted sum-rate objective, and graph homophily."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .netgen import ChannelInstance

# slack allowed on the power box for values produced by float arithmetic
BOX_TOL = 1e-12


@dataclass(frozen=True)
class PowerAllocation:
    p: np.ndarray
    rates: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def check(self, pmax: float) -> None:
        if np.any(self.p < -BOX_TOL) or np.any(self.p > pmax + BOX_TOL):
            raise ValueError(f"power allocation leaves the box [0, {pmax}]")

    @classmethod
    def evaluate(cls, instance: ChannelInstance, p) -> "PowerAllocation":
        p = np.asarray(p, dtype=np.float64)
        return cls(p, pair_rates(instance, p))


def rates_from_gains(H: np.ndarray, sigma2, p: np.ndarray) -> np.ndarray:
    """Vectorized rates over any leading batch axes. ``H`` is (..., n, n), ``p`` is (..., n)."""
    g = H * H
    n = g.shape[-1]
    direct = np.diagonal(g, axis1=-2, axis2=-1)
    off = g * (1.0 - np.eye(n))
    interference = np.matmul(off, p[..., None])[..., 0]
    noise = np.asarray(sigma2, dtype=np.float64)[..., None]
    return np.log2(1.0 + direct * p / (noise + interference))


def pair_rates(instance: ChannelInstance, p) -> np.ndarray:
    """c_i = log2(1 + h_ii^2 p_i / (sigma^2 + sum_{j != i} h_ij^2 p_j)), bits/s/Hz."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (instance.n,):
        raise ValueError(f"power vector has shape {p.shape}, expected ({instance.n},)")
    PowerAllocation(p).check(instance.pmax)
    return rates_from_gains(instance.H, instance.sigma2, p)


def weighted_sum_rate(instance: ChannelInstance, p) -> float:
    return float(np.dot(instance.weights, pair_rates(instance, p)))


def batch_weighted_sum_rate(H: np.ndarray, sigma2, weights: np.ndarray, p: np.ndarray) -> np.ndarray:
    return (weights * rates_from_gains(H, sigma2, p)).sum(axis=-1)


# -- homophily -----------------------------------------------------------


@dataclass(frozen=True)
class HomophilyReport:
    h: float
    per_node: np.ndarray  # NaN where the node was excluded
    excluded: tuple[int, ...] = ()
    noise_level: float | None = None


def homophily_discrete(adjacency, labels) -> float:
    """Mean over nodes of the fraction of neighbours sharing the node's label.

    Self-loops are ignored; isolated nodes are left out of the mean.
    """
    A = np.asarray(adjacency) != 0
    labels = np.asarray(labels)
    n = A.shape[0]
    if A.shape != (n, n) or labels.shape != (n,):
        raise ValueError("adjacency must be n x n and labels length n")
    A = A & ~np.eye(n, dtype=bool)
    degree = A.sum(axis=1)
    if not degree.any():
        raise ValueError("graph has no edges")
    same = labels[:, None] == labels[None, :]
    keep = degree > 0
    frac = (A & same).sum(axis=1)[keep] / degree[keep]
    return float(frac.mean())


def homophily_weighted(edge_weights, labels01, noise_level: float | None = None) -> HomophilyReport:
    """Edge-weighted homophily for labels in [0, 1].

    h = mean_i  sum_j e_ij (1 - |x_i - x_j|) / sum_j e_ij   over neighbours j != i.
    Nodes whose outgoing weights are all zero are excluded and reported.
    """
    E = np.array(edge_weights, dtype=np.float64)
    x = np.asarray(labels01, dtype=np.float64)
    n = E.shape[0]
    if E.shape != (n, n) or x.shape != (n,):
        raise ValueError("edge_weights must be n x n and labels length n")
    if np.any(E < 0):
        raise ValueError("edge weights must be non-negative")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("labels must lie in [0, 1]")
    np.fill_diagonal(E, 0.0)
    total = E.sum(axis=1)
    keep = total > 0
    if not keep.any():
        raise ValueError("no node has a positive-weight edge")
    agree = (E * (1.0 - np.abs(x[:, None] - x[None, :]))).sum(axis=1)
    per_node = np.full(n, np.nan)
    per_node[keep] = agree[keep] / total[keep]
    return HomophilyReport(
        h=float(per_node[keep].mean()),
        per_node=per_node,
        excluded=tuple(int(i) for i in np.flatnonzero(~keep)),
        noise_level=noise_level,
    )


def interference_edge_weights(instance: ChannelInstance) -> np.ndarray:
    """Off-diagonal gains scaled so the largest is 1 (the edge weights used for homophily tables)."""
    E = instance.H.copy()
    np.fill_diagonal(E, 0.0)
    peak = E.max()
    return E / peak if peak > 0 else E


def power_homophily(instance: ChannelInstance, p) -> HomophilyReport:
    labels = np.clip(np.asarray(p, dtype=np.float64) / instance.pmax, 0.0, 1.0)
    return homophily_weighted(interference_edge_weights(instance), labels, noise_level=instance.sigma2)


# -- csv emitters --------------------------------------------------------


def write_sum_rate_rows(path, rows: Iterable[tuple[int, float, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "sum_rate", "method"])
        for instance_id, value, method in rows:
            writer.writerow([instance_id, repr(float(value)), method])


def write_homophily_table(path, rows: Iterable[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma2", "h"])
        for sigma2, h in rows:
            writer.writerow([repr(float(sigma2)), repr(float(h))])
