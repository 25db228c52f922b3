"""Recursive least squares for the 1RC ARX model.

ARX form with discharge-positive current:

    v(k) = th1 + th2 * v(k-1) + th3 * I(k) + th4 * I(k-1)

    th2 = a_rc,  th3 = -R0,  th4 = a_rc * R0 - b_rc

The joint estimator feeds ``v = V - OCV(soc) + V_ref`` so ``th1`` soaks up
whatever OCV offset the SOC estimate leaves behind. Regressing on raw ``V``
lets the coulomb integrator leak into ``th2`` and biases the RC branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import DomainError, discretize_rc

N_THETA = 4


class NumericalError(ArithmeticError):
    """Covariance lost positive definiteness beyond tolerance."""


class UnidentifiableError(ValueError):
    """AR coefficient outside (0, 1): no RC time constant."""


class NonPhysicalError(ValueError):
    """Recovered resistance is not positive."""


def build_regressor(v_prev: float, i_now: float, i_prev: float) -> np.ndarray:
    phi = np.array([1.0, v_prev, i_now, i_prev])
    if not np.all(np.isfinite(phi)):
        raise DomainError(f"non-finite regressor input: {phi[1:]!r}")
    return phi


# ---------------------------------------------------------------------------
# ARX <-> ECM
# ---------------------------------------------------------------------------


def ecm_to_arx(r0: float, r1: float, c1: float, dt: float, bias: float = 0.0) -> np.ndarray:
    if not (r0 > 0 and r1 > 0 and c1 > 0 and dt > 0):
        raise DomainError("r0, r1, c1, dt must all be > 0")
    a, b = discretize_rc(r1, c1, dt)
    return np.array([bias, a, -r0, a * r0 - b])


def arx_to_ecm(theta, dt: float) -> dict:
    """Recover ``{r0, r1, c1}`` from an ARX parameter vector.

    Raises ``UnidentifiableError`` or ``NonPhysicalError``; callers keep
    their last valid parameters in either case.
    """
    _, a, th3, th4 = (float(x) for x in theta)
    if not (0.0 < a < 1.0) or not math.isfinite(a):
        raise UnidentifiableError(f"AR coefficient {a!r} outside (0, 1)")
    r0 = -th3
    if not r0 > 0:
        raise NonPhysicalError(f"R0 = {r0!r} is not positive")
    one_minus_a = -math.expm1(math.log(a))
    r1 = (-a * th3 - th4) / one_minus_a
    if not r1 > 0:
        raise NonPhysicalError(f"R1 = {r1!r} is not positive")
    tau = -dt / math.log(a)
    return {"r0": r0, "r1": r1, "c1": tau / r1}


# ---------------------------------------------------------------------------
# DFF-RLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DffRlsState:
    """DFF-RLS state. The covariance is carried as a square-root factor.

    ``p = p_sqrt @ p_sqrt.T``. Under long unexcited stretches the covariance
    condition number passes 1e20, which a full-matrix recursion cannot hold
    in float64; the factor only sees the square root of that.
    """

    theta: np.ndarray
    p_sqrt: np.ndarray
    lambdas: np.ndarray
    a_info: np.ndarray

    @property
    def p(self) -> np.ndarray:
        p = self.p_sqrt @ self.p_sqrt.T
        return 0.5 * (p + p.T)

    def with_lambda1(self, lambda1: float) -> "DffRlsState":
        lambdas = self.lambdas.copy()
        lambdas[0] = lambda1
        return replace(self, lambdas=lambdas)


DEFAULT_LAMBDAS = (0.995, 0.9999, 0.9999, 0.9999)
LAMBDA_MIN = 0.5


def check_lambdas(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float)
    if lam.shape != (N_THETA,):
        raise DomainError("need exactly four forgetting factors")
    if np.any(lam <= LAMBDA_MIN) or np.any(lam > 1.0):
        raise DomainError(f"forgetting factors must lie in ({LAMBDA_MIN}, 1], got {lam}")
    return lam


def init_dffrls(theta0, lambdas=DEFAULT_LAMBDAS, p0: float = 100.0) -> DffRlsState:
    if not p0 > 0:
        raise DomainError("p0 must be > 0")
    return DffRlsState(
        theta=np.array(theta0, dtype=float),
        p_sqrt=math.sqrt(p0) * np.eye(N_THETA),
        lambdas=check_lambdas(lambdas),
        a_info=np.zeros((N_THETA, N_THETA)),
    )


# factor singular values below this fraction of the largest mean lost rank
_SQRT_RANK_TOL = 1e-15


def _check_factor(s: np.ndarray) -> None:
    if not np.all(np.isfinite(s)):
        raise NumericalError("covariance factor has non-finite entries")
    sv = np.linalg.svd(s, compute_uv=False)
    if not sv[-1] > _SQRT_RANK_TOL * sv[0]:
        raise NumericalError(f"covariance lost positive definiteness: factor singular values {sv}")


def dffrls_step(state: DffRlsState, phi: np.ndarray, y: float,
                check: bool = True) -> tuple[DffRlsState, float]:
    """One diagonal-forgetting RLS update. Returns ``(state', alpha)``.

    Gain:        K = P L^-1 phi / (1 + phi' P L^-1 phi)
    Covariance:  P' = L^-1/2 (P - P psi psi' P / (1 + psi' P psi)) L^-1/2,
                 psi = L^-1/2 phi, done as a Potter square-root update.

    With ``L = lam * I`` both reduce to textbook exponentially weighted RLS.
    """
    s = state.p_sqrt
    inv_lam = 1.0 / state.lambdas
    p_c = s @ (s.T @ (inv_lam * phi))
    denom = 1.0 + phi @ p_c
    if check and not (denom > 0 and math.isfinite(denom)):
        raise NumericalError(f"gain denominator {denom!r} is not positive")
    gain = p_c / denom
    alpha = float(y - phi @ state.theta)
    theta = state.theta + gain * alpha

    f = s.T @ (np.sqrt(inv_lam) * phi)
    a = 1.0 / (1.0 + f @ f)
    gamma = 1.0 / (1.0 + math.sqrt(a))
    s_new = s - (gamma * a) * np.outer(s @ f, f)
    s_new = np.sqrt(inv_lam)[:, None] * s_new
    if check:
        _check_factor(s_new)
    return DffRlsState(theta, s_new, state.lambdas, state.a_info), alpha


def update_information_matrix(a_info: np.ndarray, lambdas, phi: np.ndarray) -> np.ndarray:
    """A' = L^1/2 A L^1/2 + phi phi'."""
    s = np.sqrt(np.asarray(lambdas, dtype=float))
    return a_info * np.outer(s, s) + np.outer(phi, phi)


# ---------------------------------------------------------------------------
# Scalar forgetting and the multi-channel baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RlsState:
    theta: np.ndarray
    p: np.ndarray
    lam: float


def init_rls(theta0, lam: float, p0: float = 100.0) -> RlsState:
    return RlsState(np.array(theta0, dtype=float), p0 * np.eye(len(theta0)), float(lam))


def rls_step(state: RlsState, phi: np.ndarray, y: float) -> tuple[RlsState, float]:
    """Textbook exponentially weighted RLS."""
    p_phi = state.p @ phi
    gain = p_phi / (state.lam + phi @ p_phi)
    alpha = float(y - phi @ state.theta)
    theta = state.theta + gain * alpha
    p = (state.p - np.outer(gain, phi @ state.p)) / state.lam
    return RlsState(theta, 0.5 * (p + p.T), state.lam), alpha


@dataclass(frozen=True, eq=False)
class MffRlsState:
    """Four scalar-forgetting channels; channel ``i`` supplies ``theta[i]``."""

    channels: tuple

    @property
    def theta(self) -> np.ndarray:
        return np.array([ch.theta[i] for i, ch in enumerate(self.channels)])

    @property
    def p(self) -> np.ndarray:
        return np.diag([ch.p[i, i] for i, ch in enumerate(self.channels)])


def init_mffrls(theta0, lambdas=DEFAULT_LAMBDAS, p0: float = 100.0) -> MffRlsState:
    lam = check_lambdas(lambdas)
    return MffRlsState(tuple(init_rls(theta0, float(l), p0) for l in lam))


def mffrls_step(state: MffRlsState, phi: np.ndarray, y: float) -> tuple[MffRlsState, float]:
    alpha = float(y - phi @ state.theta)
    channels = tuple(rls_step(ch, phi, y)[0] for ch in state.channels)
    return MffRlsState(channels), alpha
