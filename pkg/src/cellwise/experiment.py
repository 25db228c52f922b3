"""Experiment grid: config loading, profile x estimator runs, comparison tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .adaptive import AutoTuneConfig, TagConfig
from .joint import ESTIMATORS, EkfNoise, EstimateTrace, JointConfig, run_estimator
from .model import (PROFILE_KINDS, DomainError, DriveProfile, EcmParams, NoiseConfig, OcvCurve,
                    TruthTrace, default_ocv_curve, default_params, inject_noise, load_profile,
                    make_synthetic_profile, profile_rows, simulate_profile)

log = logging.getLogger(__name__)

SEED_MAX = 2 ** 64 - 1
FORMATS = ("csv", "json", "markdown")
_EXT = {"csv": "csv", "json": "json", "markdown": "md"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "hybrid"
    duration: float = 5400.0
    dt: float = 1.0
    soc0: float = 0.6
    # true cell = nominal scaled by these
    r0_scale: float = 1.0
    r1_scale: float = 1.0
    c1_scale: float = 1.0


@dataclass(frozen=True)
class ProfileSpec:
    name: str
    file: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    # None: truth SOC for synthetic profiles, OCV inversion for files
    estimator_soc0: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    profiles: tuple
    estimators: tuple = ESTIMATORS
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    output_dir: str = "results"
    seed: int = 0
    write_traces: bool = True

    def __post_init__(self):
        if not self.profiles:
            raise ConfigError("at least one profile is required")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; choose from {list(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("duplicate estimator names")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate profile names")
        if not (isinstance(self.seed, int) and 0 <= self.seed <= SEED_MAX):
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")


def default_experiment() -> ExperimentConfig:
    return ExperimentConfig(
        profiles=(ProfileSpec("hybrid", synthetic=SyntheticSpec()),),
        noise=NoiseConfig(current_bias=0.72),
    )


def _take(section: dict, allowed: set, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(allowed)}")
    return dict(section)


def _number(value, where: str) -> float:
    # YAML 1.1 loads "1.2e5" (no exponent sign) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _numbers(values, where: str, length: Optional[int] = None) -> tuple:
    if not isinstance(values, (list, tuple)):
        raise ConfigError(f"{where}: expected a list of numbers")
    out = tuple(_number(v, f"{where}[{i}]") for i, v in enumerate(values))
    if length is not None and len(out) != length:
        raise ConfigError(f"{where}: expected {length} values, got {len(out)}")
    return out


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except (DomainError, ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_joint(raw: dict) -> JointConfig:
    raw = _take(raw, {"ecm_nominal", "ocv", "tag", "autotune", "lambda_init", "ekf_noise",
                      "handoff_min_tag_run", "handoff_max_ratio", "rls_p0", "v_ref", "warmup"},
                "joint")
    kw: dict[str, Any] = {}
    nom = default_params()
    if "ecm_nominal" in raw:
        e = _take(raw["ecm_nominal"], {"r0", "r1", "c1", "capacity_ah", "eta"}, "joint.ecm_nominal")
        vals = dict(r0=nom.r0, r1=nom.r1, c1=nom.c1, capacity_q=nom.capacity_q, eta=nom.eta)
        for k, v in e.items():
            v = _number(v, f"joint.ecm_nominal.{k}")
            if k == "capacity_ah":
                vals["capacity_q"] = v * 3600.0
            else:
                vals[k] = v
        nom = _build(EcmParams, vals, "joint.ecm_nominal")
    kw["ecm_nominal"] = nom
    if "ocv" in raw:
        o = _take(raw["ocv"], {"soc", "volts"}, "joint.ocv")
        if set(o) != {"soc", "volts"}:
            raise ConfigError("joint.ocv: need both 'soc' and 'volts'")
        kw["curve"] = _build(OcvCurve, dict(soc_knots=_numbers(o["soc"], "joint.ocv.soc"),
                                            ocv_knots=_numbers(o["volts"], "joint.ocv.volts")),
                             "joint.ocv")
    if "tag" in raw:
        t = _take(raw["tag"], {"window", "std_threshold", "range_threshold"}, "joint.tag")
        base = TagConfig.for_c_rate(nom.c_rate_current)
        vals = dict(window=base.window, std_threshold=base.std_threshold,
                    range_threshold=base.range_threshold)
        for k, v in t.items():
            vals[k] = int(_number(v, f"joint.tag.{k}")) if k == "window" else _number(v, f"joint.tag.{k}")
        kw["tag_cfg"] = _build(TagConfig, vals, "joint.tag")
    else:
        kw["tag_cfg"] = TagConfig.for_c_rate(nom.c_rate_current)
    if "autotune" in raw:
        a = _take(raw["autotune"], {"eval_window", "delta", "lambda_bounds", "cn_smoothing"},
                  "joint.autotune")
        vals = {}
        for k, v in a.items():
            if k == "lambda_bounds":
                vals[k] = _numbers(v, "joint.autotune.lambda_bounds", 2)
            elif k == "eval_window":
                vals[k] = int(_number(v, "joint.autotune.eval_window"))
            else:
                vals[k] = _number(v, f"joint.autotune.{k}")
        kw["tune_cfg"] = _build(AutoTuneConfig, vals, "joint.autotune")
    if "lambda_init" in raw:
        kw["lambda_init"] = _numbers(raw["lambda_init"], "joint.lambda_init", 4)
    if "ekf_noise" in raw:
        n = _take(raw["ekf_noise"], {"q_base", "q_scale", "r", "p0"}, "joint.ekf_noise")
        vals = {}
        for k, v in n.items():
            if k in ("q_base", "p0"):
                vals[k] = _numbers(v, f"joint.ekf_noise.{k}", 2)
            else:
                vals[k] = _number(v, f"joint.ekf_noise.{k}")
        if any(x < 0 for x in vals.get("q_base", ())) or any(x <= 0 for x in vals.get("p0", ())):
            raise ConfigError("joint.ekf_noise: q_base must be >= 0 and p0 > 0")
        if vals.get("q_scale", 10.0) < 1 or vals.get("r", 1.0) <= 0:
            raise ConfigError("joint.ekf_noise: need q_scale >= 1 and r > 0")
        kw["ekf_noise"] = EkfNoise(**vals)
    for k in ("handoff_min_tag_run", "warmup"):
        if k in raw:
            kw[k] = int(_number(raw[k], f"joint.{k}"))
    for k in ("handoff_max_ratio", "rls_p0"):
        if k in raw:
            kw[k] = _number(raw[k], f"joint.{k}")
    if raw.get("v_ref") is not None:
        kw["v_ref"] = _number(raw["v_ref"], "joint.v_ref")
    return _build(JointConfig, kw, "joint")


def _parse_profile(raw, index: int, base_dir: Path) -> ProfileSpec:
    where = f"profiles[{index}]"
    raw = _take(raw, {"name", "file", "synthetic", "estimator_soc0"}, where)
    name = raw.get("name")
    if not isinstance(name, str) or not name or any(c in name for c in "/\\"):
        raise ConfigError(f"{where}: 'name' must be a non-empty string without path separators")
    if ("file" in raw) == ("synthetic" in raw):
        raise ConfigError(f"{where}: give exactly one of 'file' or 'synthetic'")
    soc0 = raw.get("estimator_soc0")
    if soc0 is not None:
        soc0 = _number(soc0, f"{where}.estimator_soc0")
        if not 0.0 <= soc0 <= 1.0:
            raise ConfigError(f"{where}.estimator_soc0 must lie in [0, 1]")
    if "file" in raw:
        if not isinstance(raw["file"], str):
            raise ConfigError(f"{where}.file: expected a path string")
        path = Path(raw["file"])
        if not path.is_absolute():
            path = base_dir / path
        return ProfileSpec(name, file=str(path), estimator_soc0=soc0)
    s = _take(raw["synthetic"], {"kind", "duration", "dt", "soc0", "r0_scale", "r1_scale", "c1_scale"},
              f"{where}.synthetic")
    vals: dict[str, Any] = {}
    for k, v in s.items():
        vals[k] = v if k == "kind" else _number(v, f"{where}.synthetic.{k}")
    entry = _build(SyntheticSpec, vals, f"{where}.synthetic")
    if entry.kind not in PROFILE_KINDS:
        raise ConfigError(f"{where}.synthetic.kind: {entry.kind!r} not in {list(PROFILE_KINDS)}")
    if not (entry.dt > 0 and entry.duration >= entry.dt):
        raise ConfigError(f"{where}.synthetic: need duration >= dt > 0")
    if not 0.0 <= entry.soc0 <= 1.0:
        raise ConfigError(f"{where}.synthetic.soc0 must lie in [0, 1]")
    if min(entry.r0_scale, entry.r1_scale, entry.c1_scale) <= 0:
        raise ConfigError(f"{where}.synthetic: parameter scales must be > 0")
    return ProfileSpec(name, synthetic=entry, estimator_soc0=soc0)


def parse_config(raw: Any, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a decoded config mapping. Relative file paths resolve against ``base_dir``."""
    raw = _take(raw, {"profiles", "estimators", "noise", "joint", "output_dir", "seed", "write_traces"},
                "config")
    base_dir = Path(base_dir)
    profiles = raw.get("profiles")
    if not isinstance(profiles, list) or not profiles:
        raise ConfigError("config: 'profiles' must be a non-empty list")
    kw: dict[str, Any] = {"profiles": tuple(_parse_profile(p, i, base_dir) for i, p in enumerate(profiles))}
    if "estimators" in raw:
        est = raw["estimators"]
        if not isinstance(est, list) or not all(isinstance(e, str) for e in est):
            raise ConfigError("config: 'estimators' must be a list of names")
        kw["estimators"] = tuple(est)
    if "noise" in raw:
        n = _take(raw["noise"], {"current_bias", "current_sigma", "voltage_sigma"}, "noise")
        kw["noise"] = _build(NoiseConfig, {k: _number(v, f"noise.{k}") for k, v in n.items()}, "noise")
    kw["joint"] = _parse_joint(raw.get("joint"))
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str):
            raise ConfigError("config: 'output_dir' must be a path string")
        kw["output_dir"] = raw["output_dir"]
    if "seed" in raw:
        seed = raw["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"config: 'seed' must be an integer, got {seed!r}")
        kw["seed"] = seed
    if "write_traces" in raw:
        if not isinstance(raw["write_traces"], bool):
            raise ConfigError("config: 'write_traces' must be true or false")
        kw["write_traces"] = raw["write_traces"]
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, path.parent)


# ---------------------------------------------------------------------------
# Profiles with truth
# ---------------------------------------------------------------------------


def derive_seed(seed: int, index: int) -> int:
    """Independent per-profile stream from the experiment seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def synthesize(entry: SyntheticSpec, nominal: EcmParams, curve: OcvCurve, noise: NoiseConfig,
               seed: int) -> tuple[DriveProfile, DriveProfile, TruthTrace]:
    """Return ``(measured, clean, truth)`` for a synthetic profile."""
    prof = make_synthetic_profile(entry.kind, entry.duration, entry.dt, seed=seed,
                                  c_rate_current=nominal.c_rate_current)
    true_params = nominal.replace(r0=nominal.r0 * entry.r0_scale, r1=nominal.r1 * entry.r1_scale,
                                  c1=nominal.c1 * entry.c1_scale)
    truth = simulate_profile(prof.current, prof.dt, true_params, curve, entry.soc0)
    clean = prof.with_(voltage=truth.voltage)
    measured = inject_noise(clean, replace(noise, seed=seed))
    return measured, clean, truth


TRUTH_COLUMNS = ("t", "soc", "v1", "voltage", "r0")


def truth_rows(t: np.ndarray, truth: TruthTrace):
    cols = (t, truth.soc, truth.v1, truth.voltage, truth.r0)
    return ([repr(float(c[k])) for c in cols] for k in range(t.size))


def load_truth(path: str | Path) -> TruthTrace:
    """Read a truth CSV written by ``simulate``; returns the SOC-bearing trace."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRUTH_COLUMNS:
            raise ConfigError(f"{path}:1: expected header {','.join(TRUTH_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=float).reshape(-1, len(TRUTH_COLUMNS))
    return TruthTrace(soc=arr[:, 1], v1=arr[:, 2], voltage=arr[:, 3], r0=arr[:, 4])


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    max_abs: float = math.nan
    avg_abs: float = math.nan
    error: Optional[str] = None


@dataclass(frozen=True)
class ComparisonTable:
    """Rows are profiles, columns are (MAX, AVG) pairs per estimator."""

    quantity: str
    unit: str
    profiles: tuple
    estimators: tuple
    cells: dict
    warmup: int = 0

    def cell(self, profile: str, estimator: str) -> Cell:
        return self.cells[(profile, estimator)]


@dataclass
class ExperimentResult:
    soc_table: ComparisonTable
    v_table: ComparisonTable
    traces: dict
    errors: dict

    @property
    def n_cells(self) -> int:
        return len(self.soc_table.profiles) * len(self.soc_table.estimators)

    @property
    def ok(self) -> bool:
        return not self.errors


def _prepare(entry: ProfileSpec, index: int, cfg: ExperimentConfig):
    if entry.file is not None:
        profile = load_profile(entry.file)
        return profile, None, entry.estimator_soc0
    seed = derive_seed(cfg.seed, index)
    measured, _, truth = synthesize(entry.synthetic, cfg.joint.ecm_nominal, cfg.joint.curve,
                                    cfg.noise, seed)
    soc0 = entry.synthetic.soc0 if entry.estimator_soc0 is None else entry.estimator_soc0
    return measured, truth, soc0


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every (profile, estimator) cell sequentially.

    A failing cell is recorded and the grid carries on.
    """
    soc_cells: dict = {}
    v_cells: dict = {}
    traces: dict = {}
    errors: dict = {}
    for index, entry in enumerate(cfg.profiles):
        try:
            profile, truth, soc0 = _prepare(entry, index, cfg)
        except (OSError, ValueError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            log.error("profile %s: %s", entry.name, msg)
            for est in cfg.estimators:
                errors[(entry.name, est)] = msg
                soc_cells[(entry.name, est)] = v_cells[(entry.name, est)] = Cell(error=msg)
            continue
        for est in cfg.estimators:
            log.info("running %s on %s", est, entry.name)
            try:
                res = run_estimator(profile, est, cfg.joint,
                                    truth_soc=None if truth is None else truth.soc,
                                    soc0=soc0, profile_name=entry.name)
            except (ArithmeticError, ValueError) as exc:
                msg = f"{type(exc).__name__}: {exc}"
                log.error("%s on %s failed: %s", est, entry.name, msg)
                errors[(entry.name, est)] = msg
                soc_cells[(entry.name, est)] = v_cells[(entry.name, est)] = Cell(error=msg)
                continue
            rep = res.report
            soc_cells[(entry.name, est)] = Cell(rep.soc_max_abs, rep.soc_avg_abs)
            v_cells[(entry.name, est)] = Cell(rep.v_max_abs, rep.v_avg_abs)
            traces[(entry.name, est)] = res.trace
    names = tuple(p.name for p in cfg.profiles)
    warmup = cfg.joint.warmup
    return ExperimentResult(
        soc_table=ComparisonTable("soc", "%", names, cfg.estimators, soc_cells, warmup),
        v_table=ComparisonTable("voltage", "mV", names, cfg.estimators, v_cells, warmup),
        traces=traces,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def table_header(table: ComparisonTable) -> list[str]:
    head = ["profile"]
    for est in table.estimators:
        head += [f"{est} MAX ({table.unit})", f"{est} AVG ({table.unit})"]
    return head


def render_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table_header(table))
    for prof in table.profiles:
        row = [prof]
        for est in table.estimators:
            c = table.cell(prof, est)
            row += [_num(c.max_abs), _num(c.avg_abs)]
        w.writerow(row)
    return buf.getvalue()


def render_json(table: ComparisonTable) -> str:
    def enc(x):
        return float(x) if math.isfinite(x) else None

    rows = []
    for prof in table.profiles:
        cells = {}
        for est in table.estimators:
            c = table.cell(prof, est)
            cells[est] = {"error": c.error} if c.error else {"max": enc(c.max_abs), "avg": enc(c.avg_abs)}
        rows.append({"profile": prof, "cells": cells})
    doc = {"quantity": table.quantity, "unit": table.unit, "warmup_samples": table.warmup,
           "estimators": list(table.estimators), "rows": rows}
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def render_markdown(table: ComparisonTable) -> str:
    head = table_header(table)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for prof in table.profiles:
        row = [prof]
        for est in table.estimators:
            c = table.cell(prof, est)
            if c.error:
                row += ["error", "error"]
            else:
                row += [f"{c.max_abs:.4f}" if math.isfinite(c.max_abs) else "n/a",
                        f"{c.avg_abs:.4f}" if math.isfinite(c.avg_abs) else "n/a"]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


_RENDER = {"csv": render_csv, "json": render_json, "markdown": render_markdown}


def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def emit_tables(tables, formats, output_dir: str | Path) -> list[Path]:
    """One SOC-error and one voltage-error file per requested format."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in _RENDER:
            raise ValueError(f"unknown format {fmt!r}; choose from {list(FORMATS)}")
        for table in tables:
            path = output_dir / f"{table.quantity}_error.{_EXT[fmt]}"
            atomic_write(path, _RENDER[fmt](table))
            written.append(path)
    return written


def trace_csv(trace: EstimateTrace) -> str:
    buf = io.StringIO()
    trace.write_csv(buf)
    return buf.getvalue()


def emit_experiment(result: ExperimentResult, formats, output_dir: str | Path,
                    write_traces: bool = True) -> list[Path]:
    output_dir = Path(output_dir)
    written = emit_tables((result.soc_table, result.v_table), formats, output_dir)
    if write_traces and result.traces:
        tdir = output_dir / "traces"
        tdir.mkdir(parents=True, exist_ok=True)
        for (prof, est), trace in sorted(result.traces.items()):
            path = tdir / f"{prof}__{est}.csv"
            atomic_write(path, trace_csv(trace))
            written.append(path)
    errors = [{"profile": p, "estimator": e, "error": m} for (p, e), m in sorted(result.errors.items())]
    path = output_dir / "errors.json"
    atomic_write(path, json.dumps({"cells": result.n_cells, "failed": len(errors), "errors": errors},
                                  indent=2) + "\n")
    written.append(path)
    return written


def profile_csv(profile: DriveProfile) -> str:
    header, rows = profile_rows(profile)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def truth_csv(t: np.ndarray, truth: TruthTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRUTH_COLUMNS)
    w.writerows(truth_rows(t, truth))
    return buf.getvalue()
