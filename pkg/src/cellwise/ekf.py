"""Extended Kalman filter over ``x = [soc, v1]`` and the Coulomb-counting baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DomainError, EcmParams, OcvCurve, discretize_rc
from .rls import NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EkfState:
    x: np.ndarray
    p: np.ndarray
    q_base: np.ndarray
    q_scale_low_excitation: float = 10.0
    r: float = 5e-3 ** 2

    def __post_init__(self):
        if self.q_scale_low_excitation < 1.0:
            raise DomainError("q_scale_low_excitation must be >= 1")
        if not self.r > 0:
            raise DomainError("measurement variance r must be > 0")


def init_ekf(soc0: float, v10: float = 0.0, p0=(0.2 ** 2, 0.01 ** 2),
             q_base=(1e-10, 1e-8), q_scale: float = 10.0, r: float = 5e-3 ** 2) -> EkfState:
    return EkfState(
        x=np.array([soc0, v10], dtype=float),
        p=np.diag(np.asarray(p0, dtype=float)),
        q_base=np.diag(np.asarray(q_base, dtype=float)),
        q_scale_low_excitation=q_scale,
        r=r,
    )


@dataclass(frozen=True, eq=False)
class EkfModel:
    """Discretised 1RC model used by the filter.

    ``f`` is the state transition ``diag(1, a_rc)`` and ``b`` the input
    column ``[-eta*dt/Q, b_rc]``.
    """

    ecm: EcmParams
    curve: OcvCurve
    dt: float
    f: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a_rc, b_rc = discretize_rc(self.ecm.r1, self.ecm.c1, self.dt)
        object.__setattr__(self, "f", np.array([[1.0, 0.0], [0.0, a_rc]]))
        object.__setattr__(self, "b", np.array([-self.ecm.eta * self.dt / self.ecm.capacity_q, b_rc]))

    def h(self, x, current: float) -> float:
        return self.curve.value(x[0]) - self.ecm.r0 * current - x[1]

    def jacobian(self, x) -> np.ndarray:
        return np.array([self.curve.slope(x[0]), -1.0])


def set_model_params(model: EkfModel, ecm: EcmParams) -> EkfModel:
    """Rebuild the model for new circuit parameters.

    Returns ``model`` itself when nothing changed.
    """
    if not isinstance(ecm, EcmParams):
        raise DomainError("expected EcmParams")
    if ecm == model.ecm:
        return model
    return EkfModel(ecm, model.curve, model.dt)


def effective_q(state: EkfState, tag: int) -> np.ndarray:
    if tag:
        return state.q_base
    return state.q_scale_low_excitation * state.q_base


def ekf_predict(state: EkfState, model: EkfModel, current: float, tag: int = 1) -> EkfState:
    """Time update. Low excitation (``tag == 0``) inflates process noise."""
    x = model.f @ state.x + model.b * current
    p = model.f @ state.p @ model.f.T + effective_q(state, tag)
    return replace(state, x=x, p=p)


def ekf_update(state: EkfState, model: EkfModel, measured_v: float,
               current: float) -> tuple[EkfState, float]:
    """Measurement update with ``h(x) = OCV(soc) - R0*I - v1``.

    SOC is clamped to [0, 1] afterwards; the covariance is left alone.
    """
    x_prior = state.x
    soc_eval = min(max(x_prior[0], 0.0), 1.0)
    h = np.array([model.curve.slope(soc_eval), -1.0])
    innovation = float(measured_v - (model.curve.value(soc_eval) - model.ecm.r0 * current - x_prior[1]))
    ph = state.p @ h
    s = float(h @ ph) + state.r
    if not s > 0:
        raise NumericalError(f"innovation variance {s!r} is not positive")
    gain = ph / s
    x = x_prior + gain * innovation
    # Joseph form keeps p symmetric PD under round-off
    ikh = np.eye(2) - np.outer(gain, h)
    p = ikh @ state.p @ ikh.T + state.r * np.outer(gain, gain)
    p = 0.5 * (p + p.T)
    if not 0.0 <= x[0] <= 1.0:
        log.debug("SOC %.6f clamped", x[0])
        x[0] = min(max(x[0], 0.0), 1.0)
    return replace(state, x=x, p=p), innovation


def coulomb_count(soc: float, current: float, dt: float, capacity_q: float,
                  eta: float = 1.0) -> float:
    soc = soc - eta * dt * current / capacity_q
    return min(max(soc, 0.0), 1.0)
