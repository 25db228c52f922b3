"""1RC equivalent-circuit cell model, OCV curve, ground-truth simulator and noise.

Sign convention: discharge current is positive. The terminal voltage at
sample ``k`` is

    V_k = OCV(soc_k) - R0 * I_k - v1_k

where ``I_k`` is the current held over the interval ``[t_k, t_k + dt)`` and
``(soc_k, v1_k)`` is the state at the start of that interval. Capacitor and
SOC are continuous across a current step, so this is the exact sample of a
zero-order-hold input.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq


class DomainError(ValueError):
    """Input outside the domain of an operation."""


# ---------------------------------------------------------------------------
# Parameters and OCV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EcmParams:
    """1RC circuit parameters. ``capacity_q`` is in A*s."""

    r0: float
    r1: float
    c1: float
    capacity_q: float = 72.0 * 3600.0
    eta: float = 1.0

    def __post_init__(self):
        for name in ("r0", "r1", "c1", "capacity_q"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be finite and > 0, got {value!r}")
        if not (0.0 < self.eta <= 1.0):
            raise DomainError(f"eta must lie in (0, 1], got {self.eta!r}")

    @property
    def tau(self) -> float:
        return self.r1 * self.c1

    @property
    def c_rate_current(self) -> float:
        """Current (A) that empties the cell in one hour."""
        return self.capacity_q / 3600.0

    def replace(self, **changes) -> "EcmParams":
        values = dict(r0=self.r0, r1=self.r1, c1=self.c1,
                      capacity_q=self.capacity_q, eta=self.eta)
        values.update(changes)
        return EcmParams(**values)


@dataclass(frozen=True, eq=False)
class OcvCurve:
    """Monotone cubic (PCHIP) open-circuit voltage curve over SOC in [0, 1]."""

    soc_knots: tuple
    ocv_knots: tuple
    _breaks: tuple = field(init=False, repr=False)
    _coefs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        soc = np.asarray(self.soc_knots, dtype=float)
        volts = np.asarray(self.ocv_knots, dtype=float)
        if soc.ndim != 1 or soc.shape != volts.shape or soc.size < 2:
            raise DomainError("soc_knots and ocv_knots must be 1-D of equal length >= 2")
        if soc[0] != 0.0 or soc[-1] != 1.0:
            raise DomainError("soc_knots must start at 0 and end at 1")
        if np.any(np.diff(soc) <= 0):
            raise DomainError("soc_knots must be strictly increasing")
        if np.any(np.diff(volts) <= 0):
            raise DomainError("ocv_knots must be strictly increasing")
        object.__setattr__(self, "soc_knots", tuple(float(s) for s in soc))
        object.__setattr__(self, "ocv_knots", tuple(float(v) for v in volts))
        pp = PchipInterpolator(soc, volts)
        # Scalar evaluation goes through plain-Python Horner on the PCHIP
        # coefficients; the scipy call overhead dominates at one point per step.
        object.__setattr__(self, "_breaks", tuple(float(x) for x in pp.x))
        object.__setattr__(self, "_coefs", tuple(tuple(float(c) for c in col) for col in pp.c.T))

    def __eq__(self, other):
        if not isinstance(other, OcvCurve):
            return NotImplemented
        return self.soc_knots == other.soc_knots and self.ocv_knots == other.ocv_knots

    def __hash__(self):
        return hash((self.soc_knots, self.ocv_knots))

    def _segment(self, soc: float) -> int:
        i = bisect.bisect_right(self._breaks, soc) - 1
        return min(max(i, 0), len(self._coefs) - 1)

    def value(self, soc: float) -> float:
        i = self._segment(soc)
        c3, c2, c1, c0 = self._coefs[i]
        h = soc - self._breaks[i]
        return ((c3 * h + c2) * h + c1) * h + c0

    def slope(self, soc: float) -> float:
        """Analytic dOCV/dSOC of the interpolant."""
        i = self._segment(soc)
        c3, c2, c1, _ = self._coefs[i]
        h = soc - self._breaks[i]
        return (3.0 * c3 * h + 2.0 * c2) * h + c1

    def inverse(self, volts: float) -> float:
        """SOC whose OCV equals ``volts``, saturating outside the curve."""
        if volts <= self.ocv_knots[0]:
            return 0.0
        if volts >= self.ocv_knots[-1]:
            return 1.0
        return float(brentq(lambda s: self.value(s) - volts, 0.0, 1.0, xtol=1e-14))

    def to_dict(self) -> dict:
        return {"soc_knots": list(self.soc_knots), "ocv_knots": list(self.ocv_knots)}


def default_ocv_curve() -> OcvCurve:
    """11-knot synthetic NMC-like curve, 3.0 V at empty to 4.2 V at full."""
    soc = np.linspace(0.0, 1.0, 11)
    ocv = [3.000, 3.450, 3.560, 3.620, 3.670, 3.730, 3.810, 3.900, 3.990, 4.090, 4.200]
    return OcvCurve(tuple(soc), tuple(ocv))


def default_params() -> EcmParams:
    """72 Ah NMC-like cell used throughout the tests and demos."""
    return EcmParams(r0=1.5e-3, r1=0.8e-3, c1=1.2e5, capacity_q=72.0 * 3600.0, eta=1.0)


def ocv(curve: OcvCurve, soc: float) -> float:
    if not (0.0 <= soc <= 1.0):
        raise DomainError(f"soc must lie in [0, 1], got {soc!r}")
    return curve.value(soc)


def discretize_rc(r1: float, c1: float, dt: float) -> tuple[float, float]:
    """Zero-order-hold discretisation of the RC branch.

    Returns ``(a_rc, b_rc)`` such that ``v1' = a_rc * v1 + b_rc * I``.
    """
    if not (r1 > 0 and c1 > 0 and dt > 0):
        raise DomainError(f"r1, c1, dt must be > 0 (got {r1}, {c1}, {dt})")
    x = dt / (r1 * c1)
    a_rc = math.exp(-x)
    # -expm1 keeps b_rc accurate when dt << tau
    b_rc = -r1 * math.expm1(-x)
    return a_rc, b_rc


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellState:
    soc: float
    v1: float = 0.0


def terminal_voltage(state: CellState, current: float, params: EcmParams,
                     curve: OcvCurve) -> float:
    return curve.value(state.soc) - params.r0 * current - state.v1


def simulate_step(state: CellState, current: float, dt: float, params: EcmParams,
                  curve: OcvCurve) -> tuple[CellState, float]:
    """Advance the cell by one interval of constant ``current``.

    Returns the next state and the terminal voltage sampled at the start of
    the interval (see module docstring).
    """
    if dt <= 0:
        raise DomainError("dt must be > 0")
    a_rc, b_rc = discretize_rc(params.r1, params.c1, dt)
    v_term = terminal_voltage(state, current, params, curve)
    soc = state.soc - params.eta * dt * current / params.capacity_q
    soc = min(max(soc, 0.0), 1.0)
    return CellState(soc, a_rc * state.v1 + b_rc * current), v_term


# ---------------------------------------------------------------------------
# Drive profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriveProfile:
    """Uniformly sampled current (and optionally voltage) record."""

    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray | None = None
    temperature: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        cur = np.asarray(self.current, dtype=float)
        if t.ndim != 1 or t.shape != cur.shape or t.size < 1:
            raise DomainError("t and current must be 1-D arrays of equal, non-zero length")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "current", cur)
        for name in ("voltage", "temperature"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != t.shape:
                    raise DomainError(f"{name} length does not match t")
                object.__setattr__(self, name, arr)
        check_timestamps(t)

    def __len__(self):
        return self.t.size

    @property
    def dt(self) -> float:
        if self.t.size < 2:
            return 1.0
        return float(self.t[1] - self.t[0])

    def with_(self, **changes) -> "DriveProfile":
        values = dict(t=self.t, current=self.current, voltage=self.voltage,
                      temperature=self.temperature)
        values.update(changes)
        return DriveProfile(**values)


def check_timestamps(t: np.ndarray, rtol: float = 1e-9) -> None:
    """Raise ``DomainError`` naming the first offending sample index."""
    if t.size < 2:
        return
    steps = np.diff(t)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        raise DomainError(f"timestamps not strictly increasing at sample {bad[0] + 1}")
    dt = steps[0]
    bad = np.flatnonzero(np.abs(steps - dt) > rtol * abs(dt))
    if bad.size:
        raise DomainError(f"non-uniform sampling interval at sample {bad[0] + 1}")


@dataclass(frozen=True)
class TruthTrace:
    """Ground-truth record produced alongside a simulated profile."""

    soc: np.ndarray
    v1: np.ndarray
    voltage: np.ndarray
    r0: np.ndarray


def simulate_profile(current: Sequence[float], dt: float, params: EcmParams, curve: OcvCurve,
                     soc0: float, v10: float = 0.0,
                     r0_schedule: Sequence[float] | None = None) -> TruthTrace:
    """Run the simulator over a current sequence.

    ``r0_schedule`` optionally gives the true R0 per sample (parameter drift).
    """
    n = len(current)
    soc = np.empty(n)
    v1 = np.empty(n)
    volts = np.empty(n)
    r0 = np.full(n, params.r0)
    if r0_schedule is not None:
        r0[:] = r0_schedule
    state = CellState(soc0, v10)
    p = params
    for k in range(n):
        if r0[k] != p.r0:
            p = p.replace(r0=float(r0[k]))
        soc[k], v1[k] = state.soc, state.v1
        state, volts[k] = simulate_step(state, float(current[k]), dt, p, curve)
    return TruthTrace(soc=soc, v1=v1, voltage=volts, r0=r0)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    current_bias: float = 0.0
    current_sigma: float = 0.0
    voltage_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.current_sigma < 0 or self.voltage_sigma < 0:
            raise DomainError("noise sigmas must be non-negative")


def inject_noise(profile: DriveProfile, cfg: NoiseConfig) -> DriveProfile:
    """Add sensor bias and gaussian noise. Deterministic for a given seed."""
    rng = np.random.default_rng(cfg.seed)
    n = len(profile)
    cur = profile.current + cfg.current_bias
    if cfg.current_sigma > 0:
        cur = cur + rng.normal(0.0, cfg.current_sigma, n)
    volts = profile.voltage
    if volts is not None and cfg.voltage_sigma > 0:
        volts = volts + rng.normal(0.0, cfg.voltage_sigma, n)
    return profile.with_(current=cur, voltage=volts)


# ---------------------------------------------------------------------------
# Synthetic profiles
# ---------------------------------------------------------------------------

PROFILE_KINDS = ("dynamic_prbs", "rest", "cc_charge", "hybrid")


def prbs_current(n: int, amplitude: float, rng: np.random.Generator,
                 min_hold: int = 2, max_hold: int = 40) -> np.ndarray:
    """Random-hold binary sequence between +amplitude and -amplitude.

    ``max_hold`` < 60 guarantees a level change inside every 60-sample window.
    """
    out = np.empty(n)
    level = amplitude if rng.random() < 0.5 else -amplitude
    k = 0
    while k < n:
        hold = int(rng.integers(min_hold, max_hold + 1))
        out[k:k + hold] = level
        level = -level
        k += hold
    return out


def make_synthetic_profile(kind: str, duration: float, dt: float = 1.0, seed: int = 0,
                           c_rate_current: float = 72.0) -> DriveProfile:
    """Generate a synthetic current profile (no voltage).

    ``hybrid`` splits ``duration`` into three equal segments: PRBS driving at
    +/-1C, rest, then constant-current charge at 0.5C.
    """
    if kind not in PROFILE_KINDS:
        raise DomainError(f"unknown profile kind {kind!r}")
    if duration < dt or dt <= 0:
        raise DomainError("need duration >= dt > 0")
    n = int(round(duration / dt))
    rng = np.random.default_rng(seed)
    if kind == "dynamic_prbs":
        current = prbs_current(n, c_rate_current, rng)
    elif kind == "rest":
        current = np.zeros(n)
    elif kind == "cc_charge":
        current = np.full(n, -0.5 * c_rate_current)
    else:
        seg = n // 3
        current = np.concatenate([
            prbs_current(seg, c_rate_current, rng),
            np.zeros(seg),
            np.full(n - 2 * seg, -0.5 * c_rate_current),
        ])
    t = np.arange(n) * dt
    return DriveProfile(t=t, current=current)


def hybrid_segments(profile_len: int) -> list[tuple[str, int, int]]:
    """Index ranges of the hybrid segments, in order."""
    seg = profile_len // 3
    return [("dynamic", 0, seg), ("rest", seg, 2 * seg), ("cc_charge", 2 * seg, profile_len)]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("t", "current", "voltage", "temperature")


class ProfileParseError(ValueError):
    pass


def load_profile(path: str | Path) -> DriveProfile:
    """Read a ``t,current[,voltage][,temperature]`` CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ProfileParseError(f"{path}: empty file") from None
        if header[:2] != ["t", "current"] or any(h not in CSV_COLUMNS for h in header):
            raise ProfileParseError(f"{path}:1: bad header {header!r}")
        cols: dict[str, list[float]] = {h: [] for h in header}
        prev_t = None
        dt = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ProfileParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise ProfileParseError(f"{path}:{lineno}: {exc}") from None
            t = values[0]
            if prev_t is not None:
                step = t - prev_t
                if step <= 0:
                    raise DomainError(f"{path}:{lineno}: timestamps not strictly increasing")
                if dt is None:
                    dt = step
                elif abs(step - dt) > 1e-9 * abs(dt):
                    raise DomainError(f"{path}:{lineno}: non-uniform sampling interval")
            prev_t = t
            for h, v in zip(header, values):
                cols[h].append(v)
    if not cols["t"]:
        raise ProfileParseError(f"{path}: no samples")
    return DriveProfile(
        t=np.array(cols["t"]),
        current=np.array(cols["current"]),
        voltage=np.array(cols["voltage"]) if "voltage" in cols else None,
        temperature=np.array(cols["temperature"]) if "temperature" in cols else None,
    )


def profile_rows(profile: DriveProfile) -> tuple[list[str], Iterable[list[str]]]:
    header = ["t", "current"]
    arrays = [profile.t, profile.current]
    for name in ("voltage", "temperature"):
        arr = getattr(profile, name)
        if arr is not None:
            header.append(name)
            arrays.append(arr)
    rows = ([repr(float(a[k])) for a in arrays] for k in range(len(profile)))
    return header, rows
