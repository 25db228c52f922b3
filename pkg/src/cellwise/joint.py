"""Joint RLS + EKF estimation with excitation gating, and the comparison baselines.

Per sample ``k`` (current ``I_k``, measured voltage ``V_k``):

1. push ``I_k`` into the tag window and compute the excitation tag;
2. on tagged samples, update the RLS on the OCV-compensated voltage
   ``w = V - OCV(soc_est) + v_ref``, the information matrix, and the
   lambda1 auto-tuner; untagged samples leave all three untouched;
3. after ``handoff_min_tag_run`` consecutive tagged samples, hand the
   recovered circuit parameters to the EKF;
4. EKF predict (process noise inflated when untagged), then update on
   ``V_k``.

Estimates refer to the state at ``t_k``, the instant ``V_k`` is sampled.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .adaptive import (AutoTuneConfig, AutoTuneState, TagConfig, autotune_step,
                       condition_number, excitation_tag, init_autotune)
from .ekf import EkfModel, EkfState, coulomb_count, ekf_predict, ekf_update, init_ekf, set_model_params
from .model import (DomainError, DriveProfile, EcmParams, OcvCurve, default_ocv_curve, default_params,
                    discretize_rc)
from .rls import (DEFAULT_LAMBDAS, DffRlsState, MffRlsState, NonPhysicalError, UnidentifiableError,
                  arx_to_ecm, build_regressor, check_lambdas, dffrls_step, ecm_to_arx, init_dffrls,
                  init_mffrls, mffrls_step, update_information_matrix)

log = logging.getLogger(__name__)

ESTIMATORS = ("coulomb", "single_ekf", "mffrls_ekf", "dffrls_ekf", "adffrls_ekf")


@dataclass(frozen=True)
class EkfNoise:
    q_base: tuple = (1e-10, 1e-8)
    q_scale: float = 10.0
    r: float = 5e-3 ** 2
    p0: tuple = (0.2 ** 2, 0.01 ** 2)


@dataclass(frozen=True)
class JointConfig:
    ecm_nominal: EcmParams = field(default_factory=default_params)
    curve: OcvCurve = field(default_factory=default_ocv_curve)
    tag_cfg: TagConfig = field(default_factory=TagConfig)
    tune_cfg: AutoTuneConfig = field(default_factory=AutoTuneConfig)
    lambda_init: tuple = DEFAULT_LAMBDAS
    ekf_noise: EkfNoise = field(default_factory=EkfNoise)
    handoff_min_tag_run: int = 10
    # recovered r0, r1, c1 must each lie within this factor of nominal
    handoff_max_ratio: float = 10.0
    rls_p0: float = 100.0
    # None: OCV at 50 % SOC
    v_ref: Optional[float] = None
    warmup: int = 300
    # Feature switches; ``for_estimator`` sets them per named estimator.
    rls_kind: Optional[str] = "dff"
    gating: bool = True
    q_adapt: bool = True
    autotune: bool = True

    def __post_init__(self):
        check_lambdas(self.lambda_init)
        if self.handoff_min_tag_run < 1:
            raise DomainError("handoff_min_tag_run must be >= 1")
        if not self.handoff_max_ratio > 1.0:
            raise DomainError("handoff_max_ratio must be > 1")
        if self.rls_kind not in (None, "dff", "mff"):
            raise DomainError(f"unknown rls_kind {self.rls_kind!r}")
        if self.warmup < 0:
            raise DomainError("warmup must be >= 0")

    @property
    def reference_voltage(self) -> float:
        return self.curve.value(0.5) if self.v_ref is None else self.v_ref

    def for_estimator(self, name: str) -> "JointConfig":
        if name == "adffrls_ekf":
            return replace(self, rls_kind="dff", gating=True, q_adapt=True, autotune=True)
        if name == "dffrls_ekf":
            return replace(self, rls_kind="dff", gating=False, q_adapt=False, autotune=False)
        if name == "mffrls_ekf":
            return replace(self, rls_kind="mff", gating=False, q_adapt=False, autotune=False)
        if name in ("single_ekf", "coulomb"):
            return replace(self, rls_kind=None, gating=False, q_adapt=False, autotune=False)
        raise DomainError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")


@dataclass(frozen=True, eq=False)
class JointState:
    rls: Optional[object]
    ekf: EkfState
    model: EkfModel
    tune: AutoTuneState
    tag_window: tuple = ()
    tag_run_length: int = 0
    last_good_ecm: Optional[EcmParams] = None
    prev_current: Optional[float] = None
    prev_voltage: Optional[float] = None
    cn: float = math.nan
    rls_updates: int = 0
    samples: int = 0
    # SOC used to OCV-compensate the regression; see joint_step
    reg_soc: float = math.nan


def init_joint(cfg: JointConfig, soc0: float, dt: float) -> JointState:
    nom = cfg.ecm_nominal
    noise = cfg.ekf_noise
    rls = None
    if cfg.rls_kind is not None:
        a_rc, _ = discretize_rc(nom.r1, nom.c1, dt)
        theta0 = ecm_to_arx(nom.r0, nom.r1, nom.c1, dt, bias=(1.0 - a_rc) * cfg.reference_voltage)
        init = init_dffrls if cfg.rls_kind == "dff" else init_mffrls
        rls = init(theta0, cfg.lambda_init, p0=cfg.rls_p0)
    return JointState(
        rls=rls,
        ekf=init_ekf(soc0, 0.0, noise.p0, noise.q_base, noise.q_scale, noise.r),
        model=EkfModel(nom, cfg.curve, dt),
        tune=init_autotune(cfg.lambda_init[0], cfg.tune_cfg),
        last_good_ecm=nom,
    )


@dataclass(frozen=True)
class Estimate:
    soc: float
    v_est: float
    tag: int
    cn: float
    lambda1: float
    r0: float
    r1: float
    c1: float


def _check_plausible(rec: dict, nominal: EcmParams, max_ratio: float) -> None:
    for name, value in rec.items():
        ratio = value / getattr(nominal, name)
        if not 1.0 / max_ratio <= ratio <= max_ratio:
            raise NonPhysicalError(f"{name} = {value!r} is {ratio:.3g}x nominal")


def joint_step(state: JointState, current: float, voltage: float,
               cfg: JointConfig) -> tuple[JointState, Estimate]:
    current = float(current)
    voltage = float(voltage)
    curve = cfg.curve
    window = (state.tag_window + (current,))[-cfg.tag_cfg.window:]
    tag = excitation_tag(window, cfg.tag_cfg) if len(window) == cfg.tag_cfg.window else 0
    learn = bool(tag) or not cfg.gating
    first = state.prev_current is None

    rls, tune, cn = state.rls, state.tune, state.cn
    updates = state.rls_updates
    reg_soc = state.reg_soc
    if rls is not None and learn and not first:
        # The regression SOC is coulomb-propagated while learning. Feeding it the
        # EKF posterior instead couples innovation-driven corrections (which
        # correlate with current) into the RC terms and can run away.
        ecm = state.model.ecm
        soc_next = coulomb_count(reg_soc, state.prev_current, state.model.dt, ecm.capacity_q, ecm.eta)
        v_ref = cfg.reference_voltage
        w_prev = state.prev_voltage - curve.value(reg_soc) + v_ref
        w_now = voltage - curve.value(soc_next) + v_ref
        reg_soc = soc_next
        phi = build_regressor(w_prev, current, state.prev_current)
        if isinstance(rls, DffRlsState):
            rls, _ = dffrls_step(rls, phi, w_now)
            rls = replace(rls, a_info=update_information_matrix(rls.a_info, rls.lambdas, phi))
            cn = condition_number(rls.a_info)
        else:
            rls, _ = mffrls_step(rls, phi, w_now)
        if cfg.autotune and isinstance(rls, DffRlsState):
            tune = autotune_step(tune, cn, cfg.tune_cfg, 1)
            if tune.lambda1 != rls.lambdas[0]:
                rls = rls.with_lambda1(tune.lambda1)
        updates += 1

    run = state.tag_run_length + 1 if (learn and not first) else 0
    model, last_good = state.model, state.last_good_ecm
    if rls is not None and run >= cfg.handoff_min_tag_run:
        try:
            rec = arx_to_ecm(rls.theta, model.dt)
            _check_plausible(rec, cfg.ecm_nominal, cfg.handoff_max_ratio)
            ecm = model.ecm.replace(**rec)
        except (UnidentifiableError, NonPhysicalError, DomainError) as exc:
            log.debug("hand-off skipped at sample %d: %s", state.samples, exc)
        else:
            model = set_model_params(model, ecm)
            last_good = ecm

    q_tag = tag if cfg.q_adapt else 1
    ekf = state.ekf
    if not first:
        ekf = ekf_predict(ekf, model, state.prev_current, q_tag)
    ekf, _ = ekf_update(ekf, model, voltage, current)
    if not learn or first:
        # Re-anchor only while the RLS is frozen; the step lands in the bias term.
        reg_soc = float(ekf.x[0])

    new_state = JointState(
        rls=rls, ekf=ekf, model=model, tune=tune, tag_window=window,
        tag_run_length=run, last_good_ecm=last_good, prev_current=current,
        prev_voltage=voltage, cn=cn, rls_updates=updates, samples=state.samples + 1,
        reg_soc=reg_soc,
    )
    lam1 = float(rls.lambdas[0]) if isinstance(rls, DffRlsState) else math.nan
    est = Estimate(
        soc=float(ekf.x[0]), v_est=model.h(ekf.x, current), tag=tag, cn=cn, lambda1=lam1,
        r0=model.ecm.r0, r1=model.ecm.r1, c1=model.ecm.c1,
    )
    return new_state, est


# ---------------------------------------------------------------------------
# Runs, traces, reports
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("t", "soc_est", "v_est", "tag", "cn", "lambda1", "r0_est", "r1_est", "c1_est")


@dataclass(frozen=True, eq=False)
class EstimateTrace:
    t: np.ndarray
    soc_est: np.ndarray
    v_est: np.ndarray
    tag: np.ndarray
    cn: np.ndarray
    lambda1: np.ndarray
    r0_est: np.ndarray
    r1_est: np.ndarray
    c1_est: np.ndarray

    def __len__(self):
        return self.t.size

    def columns(self) -> dict:
        return {name: getattr(self, name) for name in TRACE_COLUMNS}

    def equals(self, other: "EstimateTrace") -> bool:
        """Bit-for-bit equality (NaN compares equal to NaN)."""
        return all(np.array_equal(getattr(self, n), getattr(other, n), equal_nan=True)
                   for n in TRACE_COLUMNS)

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        cols = [getattr(self, n) for n in TRACE_COLUMNS]
        for k in range(len(self)):
            writer.writerow([_fmt(c[k]) for c in cols])


def _fmt(x) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


@dataclass(frozen=True)
class ErrorReport:
    """Absolute-error statistics. SOC in %, voltage in mV; NaN when not computable."""

    soc_max_abs: float
    soc_avg_abs: float
    v_max_abs: float
    v_avg_abs: float
    estimator_name: str = ""
    profile_name: str = ""
    warmup: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def error_report(trace: EstimateTrace, truth_soc=None, measured_v=None, *, warmup: int = 300,
                 estimator_name: str = "", profile_name: str = "") -> ErrorReport:
    """Max / mean absolute SOC and voltage error after a warm-up prefix."""
    n = len(trace)
    for name, ref in (("truth_soc", truth_soc), ("measured_v", measured_v)):
        if ref is not None and len(ref) != n:
            raise DomainError(f"{name} has {len(ref)} samples, trace has {n}")
    if warmup >= n:
        raise DomainError(f"warm-up of {warmup} samples leaves nothing of a {n}-sample trace")

    def stats(est, ref, scale):
        if ref is None:
            return math.nan, math.nan
        err = np.abs(np.asarray(est[warmup:]) - np.asarray(ref, dtype=float)[warmup:]) * scale
        return float(err.max()), float(err.mean())

    soc_max, soc_avg = stats(trace.soc_est, truth_soc, 100.0)
    v_max, v_avg = stats(trace.v_est, measured_v, 1000.0)
    return ErrorReport(soc_max, soc_avg, v_max, v_avg, estimator_name, profile_name, warmup)


class InsufficientExcitationError(ValueError):
    pass


def soh_metrics(trace: EstimateTrace, r0_bol: float, measured_v=None, warmup: int = 300) -> dict:
    """R0-ratio state of health plus the voltage-reconstruction error.

    ``soh_r0 = 100 * r0_bol / median(r0_est)`` over the last quarter of the
    tagged samples.
    """
    tagged = np.flatnonzero(trace.tag == 1)
    if tagged.size == 0:
        raise InsufficientExcitationError("no tagged samples in trace")
    tail = tagged[len(tagged) - max(1, len(tagged) // 4):]
    r0_est = float(np.median(trace.r0_est[tail]))
    out = {"soh_r0": 100.0 * r0_bol / r0_est, "v_avg_abs": math.nan, "v_max_abs": math.nan}
    if measured_v is not None:
        rep = error_report(trace, None, measured_v, warmup=warmup)
        out["v_avg_abs"], out["v_max_abs"] = rep.v_avg_abs, rep.v_max_abs
    return out


@dataclass(frozen=True, eq=False)
class RunResult:
    trace: EstimateTrace
    report: ErrorReport
    final_state: Optional[JointState] = None


def run_joint(profile: DriveProfile, cfg: JointConfig, soc0: float,
              state: Optional[JointState] = None) -> tuple[EstimateTrace, JointState]:
    """Drive ``joint_step`` over a profile with measured voltage."""
    if profile.voltage is None:
        raise DomainError("profile has no voltage column")
    n = len(profile)
    if state is None:
        state = init_joint(cfg, soc0, profile.dt)
    out = np.empty((n, 8))
    cur, volts = profile.current.tolist(), profile.voltage.tolist()
    for k in range(n):
        state, e = joint_step(state, cur[k], volts[k], cfg)
        out[k] = (e.soc, e.v_est, e.tag, e.cn, e.lambda1, e.r0, e.r1, e.c1)
    trace = EstimateTrace(profile.t.copy(), *(out[:, j].copy() for j in range(8)))
    return trace, state


def run_coulomb(profile: DriveProfile, cfg: JointConfig, soc0: float) -> EstimateTrace:
    """Coulomb counting; ``v_est`` is the open-loop nominal-model voltage."""
    nom, curve = cfg.ecm_nominal, cfg.curve
    dt = profile.dt
    a_rc, b_rc = discretize_rc(nom.r1, nom.c1, dt)
    n = len(profile)
    soc_est = np.empty(n)
    v_est = np.empty(n)
    soc, v1 = soc0, 0.0
    for k, i in enumerate(profile.current.tolist()):
        soc_est[k] = soc
        v_est[k] = curve.value(soc) - nom.r0 * i - v1
        soc = coulomb_count(soc, i, dt, nom.capacity_q, nom.eta)
        v1 = a_rc * v1 + b_rc * i
    nan = np.full(n, math.nan)
    return EstimateTrace(profile.t.copy(), soc_est, v_est, np.zeros(n), nan, nan.copy(),
                         np.full(n, nom.r0), np.full(n, nom.r1), np.full(n, nom.c1))


def run_estimator(profile: DriveProfile, estimator: str, cfg: JointConfig | None = None,
                  truth_soc=None, soc0: float | None = None, profile_name: str = "") -> RunResult:
    """Run one named estimator and score it.

    ``soc0`` defaults to the OCV inversion of the first voltage sample.
    SOC errors need ``truth_soc``; voltage errors are against the measured
    voltage whenever the profile carries one.
    """
    if estimator not in ESTIMATORS:
        raise DomainError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    cfg = (cfg or JointConfig()).for_estimator(estimator)
    if truth_soc is not None and len(truth_soc) != len(profile):
        raise DomainError("truth is not aligned with the profile")
    if soc0 is None:
        if profile.voltage is None:
            raise DomainError("need soc0 when the profile has no voltage")
        soc0 = cfg.curve.inverse(float(profile.voltage[0]))
    final = None
    if estimator == "coulomb":
        trace = run_coulomb(profile, cfg, soc0)
    else:
        trace, final = run_joint(profile, cfg, soc0)
    report = error_report(trace, truth_soc, profile.voltage, warmup=min(cfg.warmup, len(profile) - 1),
                          estimator_name=estimator, profile_name=profile_name)
    return RunResult(trace, report, final)
