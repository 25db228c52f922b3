"""Excitation tagging and condition-number auto-tuning of the first forgetting factor."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import DomainError

CN_INF = math.inf


def condition_number(m: np.ndarray, sym_tol: float = 1e-8) -> float:
    """2-norm condition number sigma_max / sigma_min of a symmetric matrix.

    Returns ``inf`` for a singular matrix.
    """
    m = np.asarray(m, dtype=float)
    scale = max(float(np.max(np.abs(m))), 1.0)
    if np.max(np.abs(m - m.T)) > sym_tol * scale:
        raise DomainError("matrix is not symmetric")
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[-1] <= 0.0:
        return CN_INF
    return float(sv[0] / sv[-1])


@dataclass(frozen=True)
class TagConfig:
    """Thresholds default to 5% / 10% of the 1C current of a 72 Ah cell."""

    window: int = 60
    std_threshold: float = 3.6
    range_threshold: float = 7.2

    def __post_init__(self):
        if self.window < 2:
            raise DomainError("tag window must hold at least two samples")
        if not (self.std_threshold > 0 and self.range_threshold > 0):
            raise DomainError("tag thresholds must be > 0")

    @classmethod
    def for_c_rate(cls, c_rate_current: float, window: int = 60) -> "TagConfig":
        return cls(window, 0.05 * c_rate_current, 0.1 * c_rate_current)


def excitation_tag(current_window, cfg: TagConfig) -> int:
    """1 when the window carries enough current dynamics, else 0."""
    w = np.asarray(current_window, dtype=float)
    if w.size != cfg.window:
        raise DomainError(f"expected a window of {cfg.window} samples, got {w.size}")
    spread = float(w.max() - w.min())
    return int(float(np.std(w)) > cfg.std_threshold and spread > cfg.range_threshold)


@dataclass(frozen=True)
class AutoTuneConfig:
    eval_window: int = 300
    delta: float = 0.005
    lambda_bounds: tuple = (0.90, 0.9999)
    cn_smoothing: float = 0.1

    def __post_init__(self):
        lo, hi = self.lambda_bounds
        if not (lo < hi < 1.0):
            raise DomainError("need lambda_lo < lambda_hi < 1")
        if self.delta <= 0 or self.eval_window < 1:
            raise DomainError("delta and eval_window must be positive")
        if not (0.0 < self.cn_smoothing <= 1.0):
            raise DomainError("cn_smoothing must lie in (0, 1]")

    def clamp(self, lam: float) -> float:
        lo, hi = self.lambda_bounds
        return min(max(lam, lo), hi)


@dataclass(frozen=True)
class AutoTuneState:
    lambda1: float
    direction: int = 1
    smoothed_cn: float = math.nan
    smoothed_cn_prev: float = math.nan
    samples_since_eval: int = 0


def init_autotune(lambda1: float, cfg: AutoTuneConfig) -> AutoTuneState:
    return AutoTuneState(lambda1=cfg.clamp(lambda1))


def autotune_step(state: AutoTuneState, cn_now: float, cfg: AutoTuneConfig,
                  tag: int) -> AutoTuneState:
    """Hill-climb lambda1 towards lower smoothed condition number.

    Runs only on tagged samples. Every ``eval_window`` of them the smoothed CN
    is compared with the previous evaluation: keep direction if it fell,
    flip otherwise, then take one ``delta`` step.
    """
    if not tag:
        return state
    if not math.isfinite(state.smoothed_cn):
        smoothed = cn_now
    elif not math.isfinite(cn_now):
        smoothed = state.smoothed_cn
    else:
        smoothed = state.smoothed_cn + cfg.cn_smoothing * (cn_now - state.smoothed_cn)
    count = state.samples_since_eval + 1
    if count < cfg.eval_window:
        return replace(state, smoothed_cn=smoothed, samples_since_eval=count)
    direction = state.direction
    if not math.isnan(state.smoothed_cn_prev) and not smoothed < state.smoothed_cn_prev:
        direction = -direction
    return AutoTuneState(
        lambda1=cfg.clamp(state.lambda1 + direction * cfg.delta),
        direction=direction,
        smoothed_cn=smoothed,
        smoothed_cn_prev=smoothed,
        samples_since_eval=0,
    )
