"""Error metrics: final-window RMS, normalized RMS and the gain-tuning cost."""

from __future__ import annotations

import math

import numpy as np

K_BETA = 100.0


def _window(n_total: int, fs: float, window: float) -> int:
    if fs <= 0 or window <= 0:
        raise ValueError("fs and window must be > 0")
    return min(n_total, max(1, int(round(window * fs))))


def rms_window(error: np.ndarray, fs: float, window: float = 1.0) -> float:
    """Root mean square of ``error`` over its last ``window`` seconds."""
    err = np.asarray(error, dtype=float)
    if err.size == 0:
        raise ValueError("empty error trace")
    n = _window(err.size, fs, window)
    return math.sqrt(float(np.mean(err[-n:] ** 2)))


def rms_percent(estimate: np.ndarray, truth: float, fs: float, window: float = 1.0,
                reference: float | None = None) -> float:
    """Final-window RMS error as a percentage of ``reference`` (defaults to |truth|).

    ``truth`` is the true parameter deviation; the reference is what a zero
    estimate would miss by.
    """
    ref = abs(truth) if reference is None else abs(reference)
    if ref == 0:
        raise ValueError("reference deviation is zero; rms% undefined")
    return 100.0 * rms_window(np.asarray(estimate, dtype=float) - truth, fs, window) / ref


def sideslip(vx: np.ndarray, vy: np.ndarray, min_speed: float = 0.1) -> np.ndarray:
    """atan(v_y / v_x) with v_x floored so standstill stays finite."""
    return np.arctan(np.asarray(vy, dtype=float) / np.maximum(np.asarray(vx, dtype=float), min_speed))


def tuning_cost(beta_true: np.ndarray, beta_hat: np.ndarray, dm_true: np.ndarray | float,
                dm_hat: np.ndarray, fs: float, k_beta: float = K_BETA,
                mass_window: float = 10.0) -> float:
    """Sideslip RMS (weighted by k_beta, whole run) plus mass RMS over the last ``mass_window`` s."""
    beta_true = np.asarray(beta_true, dtype=float)
    beta_hat = np.asarray(beta_hat, dtype=float)
    dm_hat = np.asarray(dm_hat, dtype=float)
    if beta_true.size == 0 or beta_true.shape != beta_hat.shape or dm_hat.shape != beta_true.shape:
        raise ValueError("cost inputs must be equal-length non-empty traces")
    beta_term = math.sqrt(float(np.mean(k_beta * (beta_true - beta_hat) ** 2)))
    n = _window(dm_hat.size, fs, mass_window)
    dm_err = (np.broadcast_to(dm_true, dm_hat.shape) - dm_hat)[-n:]
    return beta_term + math.sqrt(float(np.mean(dm_err ** 2)))
