"""Batch front end: solve, verify, simulate.

Configs are flat ``key = value`` text with dotted section keys (JSON with
the same keys, flat or nested, is accepted too).  All outputs are
deterministic for a fixed config and seed: no timestamps, LF endings,
17-significant-digit floats, and a comment line carrying the config hash
and master seed in every file.  Exit codes: 0 success / all checks pass,
1 check failure, 2 config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .coefficients import (
    coefficient_scale,
    make_model,
    make_weight,
    model_gallery,
    weight_gallery,
)
from .discretize import assemble_generator
from .eigen import solve_qsd
from .estimate import (
    duality_check,
    ergodic_cost_Y,
    ergodic_cost_Z,
    exit_rate_fit,
    extrapolate_rate_sqrt,
    lambda_quadrature_Y,
    lambda_quadrature_Z,
    qsd_histogram,
    sine_gallery,
    stationarity_distance,
    survival_curve,
)
from .geometry import BoxDomain, build_grid
from .hjb import (
    hjb_residual_adjoint,
    hjb_residual_generator,
    log_transform,
    max_residual,
    nodal_drift_Y,
    nodal_drift_Z,
)
from .simulate import (
    SimConfig,
    build_control_field,
    occupation_histogram,
    run_ensemble,
    sample_qsd_starts,
    simulate_controlled,
)

MARGIN = 0.15  # evaluation margin (fraction of smallest width) for
# residual/duality checks; inside it the defects decay at O(h^2)


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

_KNOWN_SCALARS = {
    "weight.name": str,
    "solver.tol": float,
    "grid.n": None,  # parsed specially
    "domain.lower": None,
    "domain.upper": None,
    "sim.dt_base": float,
    "sim.t_max": float,
    "sim.seed": int,
    "sim.boundary_safety": float,
    "sim.sample_dt": float,
    "sim.paths": int,
    "sim.kind": str,
    "sim.x0": None,
    "fit.n_times": int,
    "fit.t0": float,
    "fit.t1": float,
    "histogram.n": int,
    "output.dir": str,
}


@dataclass
class ProblemConfig:
    model_name: str
    model_params: dict
    weight_name: str = "one"
    weight_params: dict = field(default_factory=dict)
    lower: tuple = (0.0,)
    upper: tuple = (1.0,)
    n: tuple = (200,)
    tol: float = 1e-10
    dt_base: float = 5e-4
    t_max: float = 200.0
    seed: int = 0
    boundary_safety: float = 0.2
    sample_dt: float | None = None
    paths: int = 20000
    kind: str = "killed"
    x0: tuple | None = None
    fit_n_times: int = 201
    fit_t0: float | None = None
    fit_t1: float | None = None
    hist_n: int = 50
    out_dir: str = "./out"

    @property
    def dim(self) -> int:
        return len(self.lower)

    def canonical_items(self) -> list[tuple[str, str]]:
        items = [("version", __version__), ("model.name", self.model_name)]
        items += [(f"model.{k}", _fmt(v)) for k, v in sorted(self.model_params.items())]
        items.append(("weight.name", self.weight_name))
        items += [(f"weight.{k}", _fmt(v)) for k, v in sorted(self.weight_params.items())]
        items += [
            ("domain.lower", " ".join(_fmt(v) for v in self.lower)),
            ("domain.upper", " ".join(_fmt(v) for v in self.upper)),
            ("grid.n", " ".join(str(v) for v in self.n)),
            ("solver.tol", _fmt(self.tol)),
            ("sim.dt_base", _fmt(self.dt_base)),
            ("sim.t_max", _fmt(self.t_max)),
            ("sim.seed", str(self.seed)),
            ("sim.boundary_safety", _fmt(self.boundary_safety)),
            ("sim.sample_dt", "" if self.sample_dt is None else _fmt(self.sample_dt)),
            ("sim.paths", str(self.paths)),
            ("sim.kind", self.kind),
            ("sim.x0", "" if self.x0 is None else " ".join(_fmt(v) for v in self.x0)),
            ("fit.n_times", str(self.fit_n_times)),
            ("fit.t0", "" if self.fit_t0 is None else _fmt(self.fit_t0)),
            ("fit.t1", "" if self.fit_t1 is None else _fmt(self.fit_t1)),
            ("histogram.n", str(self.hist_n)),
        ]
        return items

    def hash(self) -> str:
        blob = "\n".join(f"{k}={v}" for k, v in self.canonical_items())
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _flatten(prefix: str, obj, out: dict):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = obj


def _read_pairs(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        flat: dict = {}
        _flatten("", data, flat)
        return flat
    pairs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        pairs[key] = val
    return pairs


def _floats(val, key) -> tuple:
    if isinstance(val, (list, tuple)):
        return tuple(float(v) for v in val)
    parts = str(val).replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{key}: expected one or more numbers")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _ints(val, key) -> tuple:
    return tuple(int(round(v)) for v in _floats(val, key))


def load_config(path: str) -> ProblemConfig:
    pairs = _read_pairs(path)
    if "model.name" not in pairs:
        raise ConfigError(f"{path}: missing required field model.name")
    model_name = str(pairs.pop("model.name"))
    if model_name not in model_gallery():
        raise ConfigError(
            f"model.name {model_name!r} not in gallery {sorted(model_gallery())}"
        )
    model_params, weight_params, kw = {}, {}, {}
    for key, val in pairs.items():
        if key.startswith("model."):
            model_params[key[len("model."):]] = float(val)
        elif key.startswith("weight.") and key != "weight.name":
            weight_params[key[len("weight."):]] = float(val)
        elif key in _KNOWN_SCALARS:
            kw[key] = val
        else:
            raise ConfigError(f"{path}: unknown config key {key!r}")

    weight_name = str(kw.pop("weight.name", "one"))
    if weight_name not in weight_gallery():
        raise ConfigError(
            f"weight.name {weight_name!r} not in gallery {sorted(weight_gallery())}"
        )

    cfg = ProblemConfig(model_name=model_name, model_params=model_params,
                        weight_name=weight_name, weight_params=weight_params)
    if "domain.lower" in kw:
        cfg.lower = _floats(kw.pop("domain.lower"), "domain.lower")
    if "domain.upper" in kw:
        cfg.upper = _floats(kw.pop("domain.upper"), "domain.upper")
    if len(cfg.lower) != len(cfg.upper):
        raise ConfigError("domain.lower and domain.upper must have equal length")
    if "grid.n" in kw:
        cfg.n = _ints(kw.pop("grid.n"), "grid.n")
        if len(cfg.n) == 1 and len(cfg.lower) == 2:
            cfg.n = cfg.n * 2
    if any(v <= 0 for v in cfg.n):
        raise ConfigError("grid.n: resolutions must be positive")

    def setf(key, attr, conv):
        if key in kw:
            try:
                setattr(cfg, attr, conv(kw.pop(key)))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc

    setf("solver.tol", "tol", float)
    setf("sim.dt_base", "dt_base", float)
    setf("sim.t_max", "t_max", float)
    setf("sim.seed", "seed", lambda v: int(float(v)))
    setf("sim.boundary_safety", "boundary_safety", float)
    setf("sim.sample_dt", "sample_dt", float)
    setf("sim.paths", "paths", lambda v: int(float(v)))
    setf("sim.kind", "kind", str)
    if "sim.x0" in kw:
        cfg.x0 = _floats(kw.pop("sim.x0"), "sim.x0")
    setf("fit.n_times", "fit_n_times", lambda v: int(float(v)))
    setf("fit.t0", "fit_t0", float)
    setf("fit.t1", "fit_t1", float)
    setf("histogram.n", "hist_n", lambda v: int(float(v)))
    setf("output.dir", "out_dir", str)

    if cfg.tol <= 0:
        raise ConfigError("solver.tol must be positive")
    if cfg.kind not in ("killed", "Y", "Z"):
        raise ConfigError(f"sim.kind must be killed, Y or Z, got {cfg.kind!r}")
    if cfg.paths < 1:
        raise ConfigError("sim.paths must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _open_out(cfg: ProblemConfig, name: str):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return open(os.path.join(cfg.out_dir, name), "w", encoding="utf-8",
                newline="\n")


def _write_csv(cfg: ProblemConfig, name: str, header: list[str],
               columns: list[np.ndarray]):
    with _open_out(cfg, name) as fh:
        fh.write(f"# config={cfg.hash()} seed={cfg.seed}\n")
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _write_json(cfg: ProblemConfig, name: str, payload: dict):
    with _open_out(cfg, name) as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(cfg: ProblemConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "version": __version__}


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _setup(cfg: ProblemConfig):
    domain = BoxDomain(cfg.lower, cfg.upper)
    grid = build_grid(domain, cfg.n)
    model = make_model(cfg.model_name, **cfg.model_params)
    weight = make_weight(cfg.weight_name, cfg.dim, **cfg.weight_params)
    return domain, grid, model, weight


def _solve(cfg: ProblemConfig, captured: list | None = None):
    domain, grid, model, weight = _setup(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        qsd = solve_qsd(model, weight, grid, tol=cfg.tol)
    if captured is not None:
        captured.extend(str(w.message) for w in caught)
    return domain, grid, model, weight, qsd


def cmd_solve(cfg: ProblemConfig) -> int:
    warns: list = []
    domain, grid, model, weight, qsd = _solve(cfg, warns)

    pts = grid.interior_coordinates()
    dim = grid.dim
    m = grid.interior_mask
    pot_psi = log_transform(qsd.psi, grid)
    pot_phit = log_transform(qsd.phi_tilde, grid)
    dY = nodal_drift_Y(qsd).reshape(dim, -1)
    dZ = nodal_drift_Z(qsd, route="rho").reshape(dim, -1)

    header = [f"x{i}" for i in range(dim)]
    cols = [pts[:, i] for i in range(dim)]
    header += ["psi", "phi", "phi_tilde", "Psi", "Phi_tilde", "mu"]
    cols += [qsd.psi[m], qsd.phi[m], qsd.phi_tilde[m],
             pot_psi.values[m], pot_phit.values[m], qsd.mu[m]]
    for i in range(dim):
        header.append(f"drift_Y_{i}")
        cols.append(dY[i])
    for i in range(dim):
        header.append(f"drift_Z_{i}")
        cols.append(dZ[i])
    _write_csv(cfg, "fields.csv", header, cols)

    rg = max_residual(hjb_residual_generator(pot_psi, model, qsd.lam), grid,
                      min_distance=MARGIN * float(np.min(domain.widths)))
    ra = max_residual(hjb_residual_adjoint(pot_phit, model, weight, qsd.lam),
                      grid, min_distance=MARGIN * float(np.min(domain.widths)))
    w = grid.weights
    summary = {
        "provenance": _provenance(cfg),
        "model": {"name": cfg.model_name, "params": cfg.model_params},
        "weight": {"name": cfg.weight_name, "params": cfg.weight_params},
        "domain": {"lower": list(cfg.lower), "upper": list(cfg.upper)},
        "grid": {"n": list(cfg.n), "h": [float(v) for v in grid.h]},
        "lambda": {
            "generator": qsd.lam,
            "adjoint": qsd.lam_adjoint,
            "allowance": qsd.allowance,
            "quadrature_Y": lambda_quadrature_Y(qsd),
            "quadrature_Z": lambda_quadrature_Z(qsd),
        },
        "residuals": {
            "eigen_generator": qsd.generator_pair.residual_norm,
            "eigen_adjoint": qsd.adjoint_pair.residual_norm,
            "hjb_generator": rg,
            "hjb_adjoint": ra,
            "margin": MARGIN,
        },
        "normalizations": {
            "phi_mass": float(np.sum(w * qsd.phi)),
            "psi_phi_mass": float(np.sum(w * qsd.psi * qsd.phi)),
            "mu_mass": float(np.sum(w * qsd.mu)),
            "nu_mass": float(np.sum(qsd.nu)),
        },
        "peclet": {
            "generator": qsd.op_generator.peclet,
            "adjoint": qsd.op_adjoint.peclet,
        },
        "warnings": warns,
    }
    _write_json(cfg, "summary.json", summary)
    print(f"lambda = {qsd.lam:.12g} (adjoint {qsd.lam_adjoint:.12g})")
    print(f"wrote {os.path.join(cfg.out_dir, 'fields.csv')} and summary.json")
    return 0


def _check(name, kind, value, threshold, passed, note=""):
    entry = {
        "name": name,
        "kind": kind,
        "value": value,
        "threshold": threshold,
        "passed": bool(passed),
    }
    if note:
        entry["note"] = note
    return entry


def cmd_verify(cfg: ProblemConfig) -> int:
    warns: list = []
    domain, grid, model, weight, qsd = _solve(cfg, warns)
    margin = MARGIN * float(np.min(domain.widths))
    scale = coefficient_scale(model, weight, grid)
    h2 = float(np.max(grid.h)) ** 2
    checks = []

    # --- spectral block (exact/allowance) ---
    pair_gap = abs(qsd.lam - qsd.lam_adjoint)
    checks.append(_check(
        "eigen.lambda_pair_agreement", "order", pair_gap, qsd.allowance,
        pair_gap <= qsd.allowance,
        "independently assembled forward/adjoint problems",
    ))
    res_tol = 10.0 * max(cfg.tol, 2.0 * np.finfo(float).eps
                         * abs(qsd.op_generator.matrix).sum(axis=1).max())
    for tag, pair in (("generator", qsd.generator_pair),
                      ("adjoint", qsd.adjoint_pair)):
        checks.append(_check(
            f"eigen.residual_{tag}", "exact", pair.residual_norm, res_tol,
            pair.residual_norm <= res_tol,
        ))
    mask = grid.interior_mask
    checks.append(_check(
        "eigen.positivity", "exact",
        float(min(qsd.psi[mask].min(), qsd.phi[mask].min())), 0.0,
        bool(qsd.psi[mask].min() > 0 and qsd.phi[mask].min() > 0),
    ))
    w = grid.weights
    for nm, val in (("phi_mass", float(np.sum(w * qsd.phi))),
                    ("psi_phi_mass", float(np.sum(w * qsd.psi * qsd.phi))),
                    ("mu_mass", float(np.sum(w * qsd.mu)))):
        checks.append(_check(
            f"eigen.normalization_{nm}", "exact", val, 1e-10,
            abs(val - 1.0) <= 1e-10,
        ))

    # --- residual orders on a half grid (order-based) ---
    n_half = tuple(max(v // 2, 8) for v in cfg.n)
    grid_h = build_grid(domain, n_half)
    qsd_h = solve_qsd(model, weight, grid_h, tol=cfg.tol)
    for tag in ("generator", "adjoint"):
        if tag == "generator":
            r_f = max_residual(hjb_residual_generator(
                log_transform(qsd.psi, grid), model, qsd.lam), grid, margin)
            r_c = max_residual(hjb_residual_generator(
                log_transform(qsd_h.psi, grid_h), model, qsd_h.lam), grid_h, margin)
        else:
            r_f = max_residual(hjb_residual_adjoint(
                log_transform(qsd.phi_tilde, grid), model, weight, qsd.lam),
                grid, margin)
            r_c = max_residual(hjb_residual_adjoint(
                log_transform(qsd_h.phi_tilde, grid_h), model, weight,
                qsd_h.lam), grid_h, margin)
        ratio = r_c / r_f if r_f > 0 else float("inf")
        checks.append(_check(
            f"hjb.residual_order_{tag}", "order", ratio, [2.8, 5.8],
            2.8 <= ratio <= 5.8,
            f"max residual {r_c:.3g} -> {r_f:.3g} under h/2 at margin {MARGIN}",
        ))

    # --- drift route identity at fixed solve (exact) ---
    dev = float(np.max(np.abs(nodal_drift_Z(qsd, route="rho")
                              - nodal_drift_Z(qsd, route="lebesgue"))))
    bound = 1e-8 + 5.0 * h2 * scale
    checks.append(_check(
        "hjb.z_drift_route_agreement", "exact", dev, bound, dev <= bound,
        "weighted and unweighted forms of the reversed drift",
    ))

    # --- quadrature identities (order-based, sized for n >= 200) ---
    for tag, quad in (("Y", lambda_quadrature_Y(qsd)),
                      ("Z", lambda_quadrature_Z(qsd))):
        rel = abs(quad - qsd.lam) / abs(qsd.lam)
        checks.append(_check(
            f"quadrature.lambda_{tag}", "order", rel, 1e-3, rel <= 1e-3,
            f"quadrature {quad:.10g} vs eigen {qsd.lam:.10g}",
        ))

    # --- generator duality (order-based) ---
    rep_f = duality_check(qsd, test_functions=sine_gallery(grid, orders=(1,)))
    rep_c = duality_check(qsd_h, test_functions=sine_gallery(grid_h, orders=(1,)))
    dual_bound = 5e-3 * (float(np.max(grid.h)) * 200.0
                         / float(np.min(domain.widths))) ** 2
    checks.append(_check(
        "duality.defect", "order", rep_f.max_defect, dual_bound,
        rep_f.max_defect <= dual_bound,
        f"{rep_f.n_excluded} nodes excluded by the density floor",
    ))
    dratio = rep_c.max_defect / rep_f.max_defect if rep_f.max_defect > 0 else float("inf")
    checks.append(_check(
        "duality.defect_order", "order", dratio, [2.5, 6.5],
        2.5 <= dratio <= 6.5,
        f"defect {rep_c.max_defect:.3g} -> {rep_f.max_defect:.3g} under h/2",
    ))

    # --- sign structure at n = 16 (exact; sharp only below Peclet 1) ---
    grid16 = build_grid(domain, (16,) * grid.dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        op16 = assemble_generator(model, grid16)
    if op16.peclet <= 1.0:
        inv = np.linalg.inv(-op16.matrix.toarray())
        checks.append(_check(
            "matrix.inverse_positivity_n16", "exact", float(inv.min()), 0.0,
            bool(inv.min() > 0.0),
        ))
    else:
        checks.append(_check(
            "matrix.inverse_positivity_n16", "exact", op16.peclet, 1.0, True,
            "skipped: Peclet at n=16 exceeds 1, sign structure not guaranteed",
        ))

    # --- simulation-backed block (SE-based) ---
    sim_checks, lam_stats = _verify_simulation(cfg, domain, grid, model, qsd)
    checks.extend(sim_checks)

    passed = all(c["passed"] for c in checks)
    report = {
        "provenance": _provenance(cfg),
        "model": {"name": cfg.model_name, "params": cfg.model_params},
        "weight": {"name": cfg.weight_name, "params": cfg.weight_params},
        "grid": {"n": list(cfg.n), "h": [float(v) for v in grid.h]},
        "lambda": {
            "generator": qsd.lam,
            "adjoint": qsd.lam_adjoint,
            "quadrature_Y": lambda_quadrature_Y(qsd),
            "quadrature_Z": lambda_quadrature_Z(qsd),
            **lam_stats,
        },
        "peclet": {
            "generator": qsd.op_generator.peclet,
            "adjoint": qsd.op_adjoint.peclet,
        },
        "checks": checks,
        "warnings": warns,
        "passed": passed,
    }
    _write_json(cfg, "report.json", report)
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']} ({c['kind']}): value={c['value']:.6g}")
    print(f"report: {os.path.join(cfg.out_dir, 'report.json')} "
          f"({'all pass' if passed else 'FAILURES PRESENT'})")
    return 0 if passed else 1


def _verify_simulation(cfg: ProblemConfig, domain, grid, model, qsd):
    """Monte Carlo side of verify.

    The killed run keeps the configured step and its 4x coarsening so the
    sqrt(dt) extrapolation has a known ratio; paths start from the solved
    exit distribution, which makes the survivor curve exponential from
    t = 0.  The controlled runs need a long time average, so the horizon
    is floored at 2000 and the recording stride capped at 0.05 regardless
    of sim.t_max, which is sized for the exit-time run.
    """
    checks = []
    lam = qsd.lam
    # the rate fit needs several mean lifetimes no matter how short the
    # demo horizon is; past ~12/lam the tail is empty anyway
    t_kill = min(max(cfg.t_max, 8.0 / lam), 12.0 / lam)
    ens_f = run_ensemble(
        "killed", model, domain, sample_qsd_starts(qsd, cfg.paths, cfg.seed),
        SimConfig(dt_base=cfg.dt_base, t_max=t_kill, master_seed=cfg.seed),
        cfg.paths,
    )
    ens_c = run_ensemble(
        "killed", model, domain,
        sample_qsd_starts(qsd, cfg.paths, cfg.seed + 1),
        SimConfig(dt_base=4 * cfg.dt_base, t_max=t_kill,
                  master_seed=cfg.seed + 1),
        cfg.paths,
    )
    times = np.linspace(0.0, t_kill, cfg.fit_n_times)
    window = None
    if cfg.fit_t0 is not None or cfg.fit_t1 is not None:
        window = (cfg.fit_t0 or 0.0, cfg.fit_t1 or t_kill)
    fit_f = exit_rate_fit(survival_curve(ens_f, times=times), window=window)
    fit_c = exit_rate_fit(survival_curve(ens_c, times=times), window=window)
    lam_ex, se_ex = extrapolate_rate_sqrt(fit_f, fit_c, 4.0)
    tol_rate = max(2.0 * se_ex, 0.03 * lam)
    checks.append(_check(
        "lambda.exit_rate_agreement", "stat", abs(lam_ex - lam), tol_rate,
        abs(lam_ex - lam) <= tol_rate,
        f"extrapolated rate {lam_ex:.6g} +- {se_ex:.3g} vs eigen {lam:.6g}",
    ))
    checks.append(_check(
        "simulate.survival_r2", "stat", fit_f.r_squared, 0.995,
        fit_f.r_squared >= 0.995,
        f"fit window [{fit_f.t0:.3g}, {fit_f.t1:.3g}], {fit_f.n_points} points",
    ))

    # controlled block: ergodic costs and occupation
    lam_stats = {
        "exit_rate": lam_ex,
        "exit_rate_se": se_ex,
    }
    hist_grid = build_grid(domain, (cfg.hist_n,) * grid.dim)
    mu_ref = np.asarray(qsd.mu)
    # reference density restricted to the histogram grid
    mu_hist = _restrict_density(mu_ref, grid, hist_grid)
    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 is not None else (
        np.asarray(domain.lower) + 0.5 * domain.widths
    )
    t_ctrl = max(cfg.t_max, 2000.0)
    scfg = SimConfig(dt_base=cfg.dt_base, t_max=t_ctrl,
                     master_seed=cfg.seed + 2,
                     boundary_safety=cfg.boundary_safety,
                     sample_dt=cfg.sample_dt or 0.05)
    for tag, builder, estimator in (
        ("Y", lambda: build_control_field(qsd, "Y"), ergodic_cost_Y),
        ("Z", lambda: build_control_field(qsd, "Z", route="rho"), ergodic_cost_Z),
    ):
        fld = builder()
        traj = simulate_controlled(fld, x0, scfg)
        est = estimator(traj)
        tol_cost = max(2.0 * est.stderr, 0.03 * lam)
        checks.append(_check(
            f"lambda.cost_{tag}_agreement", "stat", abs(est.value - lam),
            tol_cost, abs(est.value - lam) <= tol_cost,
            f"path average {est.value:.6g} +- {est.stderr:.3g} over T={t_ctrl:g}",
        ))
        lam_stats[f"cost_{tag}"] = est.value
        lam_stats[f"cost_{tag}_se"] = est.stderr
        dens = occupation_histogram(traj, hist_grid)
        l1 = stationarity_distance(dens, mu_hist, hist_grid)
        l1_tol = max(0.15, 3.0 / math.sqrt(t_ctrl))
        checks.append(_check(
            f"simulate.occupation_{tag}_L1", "stat", l1, l1_tol, l1 <= l1_tol,
        ))
        checks.append(_check(
            f"simulate.nonexit_{tag}", "stat", float(traj.violations), 0.0,
            traj.violations == 0,
            "rejection budget never exhausted along the path",
        ))
    return checks, lam_stats


def _restrict_density(density: np.ndarray, grid, coarse) -> np.ndarray:
    """Sample a fine nodal density at coarse node coordinates and renormalize."""
    pts = coarse.node_coordinates()
    lower = np.asarray(grid.domain.lower)
    idx = np.rint((pts - lower) / grid.h).astype(np.int64)
    for ax, n in enumerate(grid.shape):
        np.clip(idx[:, ax], 0, n - 1, out=idx[:, ax])
    vals = density.reshape(grid.shape)[tuple(idx.T)].reshape(coarse.shape)
    mass = float(np.sum(coarse.weights * vals))
    return vals / mass


def cmd_simulate(cfg: ProblemConfig) -> int:
    domain, grid, model, weight, qsd = _solve(cfg)
    hist_grid = build_grid(domain, (cfg.hist_n,) * grid.dim)

    if cfg.kind == "killed":
        if cfg.x0 is not None:
            starts = np.asarray(cfg.x0, dtype=float)
        else:
            starts = sample_qsd_starts(qsd, cfg.paths, cfg.seed)
        scfg = SimConfig(dt_base=cfg.dt_base, t_max=cfg.t_max,
                         master_seed=cfg.seed)
        ens = run_ensemble("killed", model, domain, starts, scfg, cfg.paths)
        curve = survival_curve(
            ens, times=np.linspace(0.0, ens.t_max, cfg.fit_n_times)
        )
        _write_csv(cfg, "survival.csv",
                   ["t", "p_hat", "stderr", "survivors"],
                   [curve.times, curve.p_hat, curve.stderr,
                    curve.counts.astype(float)])
        try:
            dens = qsd_histogram(ens, hist_grid)
        except ValueError as exc:
            print(f"histogram skipped: {exc}")
        else:
            phi_hist = _restrict_density(qsd.phi, grid, hist_grid)
            l1 = stationarity_distance(dens, phi_hist, hist_grid)
            pts = hist_grid.node_coordinates()
            cols = [pts[:, i] for i in range(grid.dim)]
            cols += [dens.reshape(-1), phi_hist.reshape(-1)]
            _write_csv(cfg, "histogram.csv",
                       [f"x{i}" for i in range(grid.dim)]
                       + ["density", "reference_phi"], cols)
            print(f"survivor histogram L1 distance to phi: {l1:.6g}")
        print(f"survival curve written; {int(ens.exited.sum())} of "
              f"{cfg.paths} paths exited before t={ens.t_max:g}")
        return 0

    # controlled single long path
    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 is not None else (
        np.asarray(domain.lower) + 0.5 * domain.widths
    )
    fld = build_control_field(qsd, cfg.kind, route="rho")
    scfg = SimConfig(dt_base=cfg.dt_base, t_max=cfg.t_max,
                     master_seed=cfg.seed,
                     boundary_safety=cfg.boundary_safety,
                     sample_dt=cfg.sample_dt)
    traj = simulate_controlled(fld, x0, scfg)
    _write_csv(cfg, "costs.csv",
               ["t", "cost_control_cum", "cost_potential_cum"],
               [traj.times, traj.cost_control, traj.cost_potential])
    dens = occupation_histogram(traj, hist_grid)
    mu_hist = _restrict_density(qsd.mu, grid, hist_grid)
    l1 = stationarity_distance(dens, mu_hist, hist_grid)
    pts = hist_grid.node_coordinates()
    cols = [pts[:, i] for i in range(grid.dim)]
    cols += [dens.reshape(-1), mu_hist.reshape(-1)]
    _write_csv(cfg, "histogram.csv",
               [f"x{i}" for i in range(grid.dim)]
               + ["density", "reference_mu"], cols)
    est = (ergodic_cost_Y if cfg.kind == "Y" else ergodic_cost_Z)(traj)
    print(f"occupation L1 distance to mu: {l1:.6g}")
    print(f"ergodic cost average: {est.value:.6g} +- {est.stderr:.3g} "
          f"(eigen lambda {qsd.lam:.6g})")
    if traj.violations:
        print(f"WARNING: {traj.violations} boundary violation(s) recorded")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qsdlab",
        description="quasistationary distributions, principal Dirichlet "
                    "eigenpairs and the associated controlled diffusions",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("solve", cmd_solve), ("verify", cmd_verify),
                     ("simulate", cmd_simulate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="problem config file")
        sp.add_argument("--out", default=None, help="output directory "
                        "(default ./out or output.dir from the config)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override sim.seed")
        sp.add_argument("--paths", type=int, default=None,
                        help="override sim.paths")
        sp.add_argument("--kind", choices=["killed", "Y", "Z"], default=None,
                        help="override sim.kind")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.paths is not None:
            cfg.paths = args.paths
        if args.kind is not None:
            cfg.kind = args.kind
        return args.func(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
