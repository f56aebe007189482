"""Classical allocators: full power, scalar WMMSE, and exhaustive grid search."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netgen import ChannelBatch, ChannelInstance
from .objective import PowerAllocation, batch_weighted_sum_rate, pair_rates

MSE_FLOOR = 1e-12
MAX_GRID_PAIRS = 4


@dataclass
class WmmseState:
    v: np.ndarray  # sqrt-power amplitudes
    u: np.ndarray  # receiver scalars
    mse_w: np.ndarray  # MSE weights
    iter: int = 0


def max_power(instance: ChannelInstance) -> PowerAllocation:
    return PowerAllocation.evaluate(instance, np.full(instance.n, instance.pmax))


def _receiver_update(g, direct, v, sigma2):
    # u_i = sqrt(g_ii) v_i / (sigma2 + sum_j g_ij v_j^2)
    received = np.matmul(g, (v * v)[..., None])[..., 0] + sigma2[..., None]
    u = direct * v / received
    mse_w = 1.0 / np.maximum(1.0 - u * direct * v, MSE_FLOOR)
    return u, mse_w


def _transmitter_update(g, direct, u, mse_w, weights, vmax):
    num = weights * mse_w * u * direct
    # sum_j w_j mse_w_j u_j^2 g_ji : contract over receivers j
    den = np.matmul((weights * mse_w * u * u)[..., None, :], g)[..., 0, :]
    v = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(v, 0.0, vmax[..., None])


def wmmse_batch(
    batch: ChannelBatch,
    iterations: int = 100,
    tol: float | None = None,
    trace: bool = False,
):
    """Run WMMSE on stacked instances, starting from full power.

    Returns the power array (B, n); with ``trace=True`` also the (sweeps + 1, B)
    weighted sum-rate history, first row being the initial point.
    ``tol`` enables the per-batch early exit once no sum-rate moves more than tol.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    g = batch.H * batch.H
    direct = np.sqrt(np.diagonal(g, axis1=-2, axis2=-1))
    vmax = np.sqrt(batch.pmax)
    v = np.broadcast_to(vmax[:, None], direct.shape).copy()
    history = []
    prev = batch_weighted_sum_rate(batch.H, batch.sigma2, batch.weights, v * v) if (trace or tol is not None) else None
    if trace:
        history.append(prev)
    for it in range(iterations):
        u, mse_w = _receiver_update(g, direct, v, batch.sigma2)
        v = _transmitter_update(g, direct, u, mse_w, batch.weights, vmax)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(v), axis=-1))[0])
            raise FloatingPointError(f"WMMSE produced a non-finite amplitude at sweep {it} for batch entry {bad}")
        if trace or tol is not None:
            cur = batch_weighted_sum_rate(batch.H, batch.sigma2, batch.weights, v * v)
            if trace:
                history.append(cur)
            if tol is not None and np.all(np.abs(cur - prev) < tol):
                break
            prev = cur
    # amplitudes at the cap map to pmax exactly (sqrt(pmax)**2 can round)
    p = np.where(v >= vmax[:, None], batch.pmax[:, None], v * v)
    if trace:
        return p, np.array(history)
    return p


def wmmse(instance: ChannelInstance, iterations: int = 100, tol: float | None = None) -> PowerAllocation:
    p = wmmse_batch(ChannelBatch.stack([instance]), iterations, tol)[0]
    return PowerAllocation.evaluate(instance, p)


def wmmse_state(instance: ChannelInstance, iterations: int) -> WmmseState:
    """Explicit state after ``iterations`` sweeps (for inspection and tests)."""
    g = instance.H * instance.H
    direct = np.sqrt(np.diag(g))
    vmax = np.array(np.sqrt(instance.pmax))
    sigma2 = np.array(instance.sigma2)
    v = np.full(instance.n, float(vmax))
    u, mse_w = _receiver_update(g, direct, v, sigma2)
    for _ in range(iterations):
        v = _transmitter_update(g, direct, u, mse_w, instance.weights, vmax)
        u, mse_w = _receiver_update(g, direct, v, sigma2)
    return WmmseState(v=v, u=u, mse_w=mse_w, iter=iterations)


def grid_oracle(instance: ChannelInstance, levels: int = 101, chunk: int = 200_000) -> PowerAllocation:
    """Exhaustive search of the weighted sum-rate over an evenly spaced power grid."""
    n = instance.n
    if n > MAX_GRID_PAIRS:
        raise ValueError(f"grid oracle is limited to n <= {MAX_GRID_PAIRS} (got {n})")
    if levels < 2:
        raise ValueError("need at least two grid levels")
    grid = np.linspace(0.0, instance.pmax, levels)
    total = levels**n
    best_val, best_idx = -np.inf, 0
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.stack(np.unravel_index(flat, (levels,) * n), axis=-1)
        P = grid[idx]
        vals = batch_weighted_sum_rate(instance.H[None], np.full(len(P), instance.sigma2), instance.weights[None], P)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_idx = vals[k], flat[k]
    p = grid[np.array(np.unravel_index(best_idx, (levels,) * n))]
    return PowerAllocation(p, pair_rates(instance, p))
