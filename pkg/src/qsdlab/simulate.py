"""Euler-Maruyama engines for the killed baseline process and the
conditioned/controlled processes.

Two engines with different shapes:

* The killed process is stepped with a fixed dt over whole path blocks,
  vectorized across paths.  Exit = first step landing strictly outside the
  closed box; the exit time is the time of that step (no bridge correction,
  so exit times carry an O(sqrt(dt)) bias that the estimators must handle).
* The controlled processes carry a drift that blows up like 1/d(x) near the
  boundary, so they use a scalar compiled kernel with a boundary-adaptive
  step: dt_eff = min(dt_base, eps_b d(x)^2 / (|a(x)| + d(x)|drift(x)|)),
  which keeps the per-step drift displacement at or below eps_b * d(x).
  A step that still proposes an outside state is rejected and retried with
  fresh noise at half the step, up to 30 halvings; exhausting the budget is
  recorded as a violation and the path is frozen there (never silently
  clamped).

Randomness: every path owns a counter-based stream keyed by
(master_seed, path_index), so ensembles are bitwise reproducible under any
chunking or worker count.  Key (master_seed, 2^64-1) is reserved for
initial-state sampling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .coefficients import CoefficientModel, potential_c, potential_c_tilde
from .geometry import BoxDomain, Grid
from .hjb import log_transform, nodal_drift_Y, nodal_drift_Z

__all__ = [
    "SimConfig",
    "Trajectory",
    "TrajectoryEnsemble",
    "ControlField",
    "build_control_field",
    "simulate_killed",
    "simulate_controlled",
    "run_ensemble",
    "occupation_histogram",
    "sample_qsd_starts",
]

# Steps per pregenerated noise block in the killed engine.  Dead paths are
# compacted away only at block boundaries, so this bounds the wasted work.
_BLOCK_STEPS = 256
# Normals per refill of a controlled path's noise buffer.
_NOISE_BUFFER = 1 << 15
# Hard floor on the adaptive step, as a fraction of dt_base.
_DT_FLOOR = 1e-6
_MAX_HALVINGS = 30

_INIT_STREAM = np.uint64(0xFFFFFFFFFFFFFFFF)


def _path_generator(master_seed: int, path_index) -> np.random.Generator:
    key = np.array([master_seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimConfig:
    """Stepping parameters shared by both engines.

    sample_dt is the output stride for recorded trajectories; None picks
    max(dt_base, t_max/2048).  boundary_safety is the eps_b factor of the
    adaptive rule and must sit in (0, 1).
    """

    dt_base: float
    t_max: float
    master_seed: int = 0
    boundary_safety: float = 0.2
    kill_on_exit: bool = True
    sample_dt: float | None = None
    n_workers: int = 1

    def __post_init__(self):
        if not self.dt_base > 0.0:
            raise ValueError("dt_base must be positive")
        if self.t_max < self.dt_base:
            raise ValueError("t_max must be at least dt_base")
        if not 0.0 < self.boundary_safety < 1.0:
            raise ValueError("boundary_safety must lie in (0, 1)")
        if self.sample_dt is not None and self.sample_dt < self.dt_base:
            raise ValueError("sample_dt must be at least dt_base")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")

    def stride(self) -> float:
        return self.sample_dt if self.sample_dt is not None else max(
            self.dt_base, self.t_max / 2048.0
        )


@dataclass
class Trajectory:
    """One recorded path, frozen at its exit (or violation) time.

    states[k] is the position at times[k] under the stopped convention: past
    the exit time the state stays at the last inside position.  exit_time is
    +inf when the path survives the horizon.  For controlled runs the two
    cumulative cost integrals (quadratic control cost, potential term) are
    recorded on the same time grid; for killed runs they are None.
    """

    times: np.ndarray
    states: np.ndarray
    exit_time: float
    exited: bool
    violations: int = 0
    cost_control: np.ndarray | None = None
    cost_potential: np.ndarray | None = None


@dataclass
class TrajectoryEnsemble:
    """Per-path summaries; full paths are not retained.

    exit_times uses +inf for survivors.  final_states holds the stopped
    state at t_max (survivors) or at exit (killed paths).  For controlled
    ensembles final_costs has shape (n_paths, 2): the two cumulative cost
    integrals at the end of the path.
    """

    kind: str
    n_paths: int
    master_seed: int
    t_max: float
    exit_times: np.ndarray
    exited: np.ndarray
    violations: np.ndarray
    final_states: np.ndarray
    final_costs: np.ndarray | None = None

    def survivor_counts(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        return (self.exit_times[None, :] > t[:, None]).sum(axis=1)

    @property
    def violation_fraction(self) -> float:
        return float((self.violations > 0).mean())


# ---------------------------------------------------------------------------
# killed process
# ---------------------------------------------------------------------------


def _killed_chunk(model, domain, x0s, dt, n_steps, master_seed, path_indices,
                  record_every=0):
    """Vectorized killed paths sharing the global step grid.

    Returns (exit_times, final_states, recorded) where recorded is None
    unless record_every > 0 (then a (n_rec, m, dim) array of stopped states
    at every record_every-th step, used by the single-path wrapper).
    """
    m, dim = x0s.shape
    q = model.noise_dim
    sqdt = math.sqrt(dt)
    gens = [_path_generator(master_seed, i) for i in path_indices]

    x = np.array(x0s, dtype=float)
    exit_times = np.full(m, np.inf)
    alive = np.arange(m)
    recorded = None
    if record_every > 0:
        n_rec = n_steps // record_every
        recorded = np.empty((n_rec, m, dim))

    step0 = 0
    while step0 < n_steps and alive.size:
        nb = min(_BLOCK_STEPS, n_steps - step0)
        noise = np.empty((alive.size, nb, q))
        for r, row in enumerate(alive):
            noise[r] = gens[row].standard_normal((nb, q))
        xa = x[alive]
        exit_step = np.zeros(alive.size, dtype=np.int64)
        for s in range(nb):
            live = exit_step == 0
            prop = xa + model.b(xa) * dt + sqdt * np.einsum(
                "mij,mj->mi", model.sigma(xa), noise[:, s, :]
            )
            inside = domain.contains(prop, closed=True)
            ok = live & inside
            xa[ok] = prop[ok]
            exit_step[live & ~inside] = step0 + s + 1
            if record_every > 0 and (step0 + s + 1) % record_every == 0:
                x[alive] = xa
                recorded[(step0 + s) // record_every] = x
        x[alive] = xa
        died = exit_step > 0
        exit_times[alive[died]] = exit_step[died] * dt
        alive = alive[~died]
        step0 += nb

    if record_every > 0 and step0 < n_steps:
        # every path died before the horizon; the remaining output rows
        # hold the stopped states
        recorded[step0 // record_every:] = x
    return exit_times, x, recorded


def simulate_killed(model: CoefficientModel, domain: BoxDomain, x0,
                    cfg: SimConfig) -> Trajectory:
    """Single killed path with states recorded at the output stride."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not bool(domain.contains(x0[0], closed=False)):
        raise ValueError("x0 must lie in the open domain")
    n_steps = int(math.ceil(cfg.t_max / cfg.dt_base - 1e-12))
    rec = max(1, int(round(cfg.stride() / cfg.dt_base)))
    exit_times, final, recorded = _killed_chunk(
        model, domain, x0, cfg.dt_base, n_steps, cfg.master_seed, [0],
        record_every=rec,
    )
    times = np.concatenate(
        [[0.0], cfg.dt_base * rec * np.arange(1, recorded.shape[0] + 1)]
    )
    states = np.vstack([x0, recorded[:, 0, :]])
    tau = float(exit_times[0])
    return Trajectory(
        times=times,
        states=states,
        exit_time=tau,
        exited=math.isfinite(tau),
    )


# ---------------------------------------------------------------------------
# controlled processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlField:
    """Nodal fields the controlled kernel interpolates bilinearly.

    data is stacked on the interior-node lattice: dim rows of total drift,
    dim*noise_dim rows of sigma, one row of the Frobenius norm of a (for
    the adaptive step rule), then the two cost-rate rows (quadratic control
    cost, additive potential).  Evaluation clamps to the interior hull, so
    the 1/d drift growth is cut off one spacing from the wall; the adaptive
    stepper and the rejection rule own the last layer.
    """

    kind: str
    axes: tuple
    data: np.ndarray
    dim: int
    noise_dim: int
    domain: BoxDomain


def build_control_field(qsd, kind: str = "Y", route: str = "rho") -> ControlField:
    """Package the optimal-drift and cost fields of a solve for simulation.

    kind "Y" attaches drift b - a D(-log psi) and cost rate
    (1/2) Dpsi-log . a Dpsi-log; kind "Z" attaches the time-reversed drift
    and its cost rate plus the potential term.  route is forwarded to the
    Z-drift construction ("rho" uses the solve's weight, "lebesgue" forces
    the unweighted form -- the fields agree up to discretization error).
    """
    grid: Grid = qsd.grid
    model: CoefficientModel = qsd.model
    dim, q = model.dim, model.noise_dim
    ishape = tuple(n - 2 for n in grid.shape)
    pts = grid.interior_coordinates()
    a = model.a(pts)
    sig = model.sigma(pts)

    if kind == "Y":
        drift = nodal_drift_Y(qsd)
        g = log_transform(qsd.psi, grid).gradient_interior()
        cost_c = np.zeros(ishape)
    elif kind == "Z":
        drift = nodal_drift_Z(qsd, route=route)
        if route == "rho":
            g = log_transform(qsd.phi_tilde, grid).gradient_interior()
            cost_c = potential_c_tilde(model, qsd.weight, pts).reshape(ishape)
        elif route == "lebesgue":
            g = log_transform(qsd.phi, grid).gradient_interior()
            cost_c = potential_c(model, pts).reshape(ishape)
        else:
            raise ValueError(f"unknown route {route!r}")
    else:
        raise ValueError(f"unknown control kind {kind!r}")

    gf = g.reshape(dim, -1)
    cost_u = 0.5 * np.einsum("im,mij,jm->m", gf, a, gf).reshape(ishape)
    anorm = np.sqrt(np.einsum("mij,mij->m", a, a)).reshape(ishape)
    rows = [drift.reshape(dim, -1).reshape((dim,) + ishape)]
    rows.append(sig.reshape(-1, dim * q).T.reshape((dim * q,) + ishape))
    rows.append(anorm[None])
    rows.append(cost_u[None])
    rows.append(cost_c[None])
    data = np.concatenate(rows, axis=0)
    if dim == 1:
        data = data[:, :, None]
    data = np.ascontiguousarray(data)
    if not np.all(np.isfinite(data)):
        raise ValueError("control field contains non-finite nodal values")
    axes = tuple(np.ascontiguousarray(ax[1:-1]) for ax in grid.axes)
    return ControlField(kind=kind, axes=axes, data=data, dim=dim,
                        noise_dim=q, domain=grid.domain)


@njit(cache=True, nogil=True)
def _interp_rows(data, ax0, ax1, dim, y0, y1, out):  # pragma: no cover
    # data is (k, n0, n1) with n1 = 1 in one dimension; clamped bilinear
    n0 = ax0.shape[0]
    h0 = ax0[1] - ax0[0]
    u = (y0 - ax0[0]) / h0
    if u <= 0.0:
        i0, f0 = 0, 0.0
    elif u >= n0 - 1:
        i0, f0 = n0 - 2, 1.0
    else:
        i0 = int(u)
        f0 = u - i0
    i1, f1 = 0, 0.0
    if dim == 2:
        n1 = ax1.shape[0]
        h1 = ax1[1] - ax1[0]
        v = (y1 - ax1[0]) / h1
        if v <= 0.0:
            i1, f1 = 0, 0.0
        elif v >= n1 - 1:
            i1, f1 = n1 - 2, 1.0
        else:
            i1 = int(v)
            f1 = v - i1
    for k in range(data.shape[0]):
        low = data[k, i0, i1] * (1.0 - f0) + data[k, i0 + 1, i1] * f0
        if f1 > 0.0:
            high = data[k, i0, i1 + 1] * (1.0 - f0) + data[k, i0 + 1, i1 + 1] * f0
            out[k] = low * (1.0 - f1) + high * f1
        else:
            out[k] = low


@njit(cache=True, nogil=True)
def _advance(x, t, t_out, costs, data, ax0, ax1, dim, qdim, lo, hi,
             dt_base, eps_b, dt_floor, noise, nptr):  # pragma: no cover
    """Integrate one controlled path from t to t_out.

    Returns (status, t, nptr): 0 = reached t_out, 1 = noise buffer empty
    (caller refills and re-enters), 2 = rejection budget exhausted at time t
    (violation; caller freezes the path).
    """
    vals = np.empty(data.shape[0])
    i_sig = dim
    i_anorm = dim + dim * qdim
    i_cu = i_anorm + 1
    i_cc = i_anorm + 2
    while t < t_out - 1e-12:
        if dim == 1:
            _interp_rows(data, ax0, ax1, 1, x[0], 0.0, vals)
        else:
            _interp_rows(data, ax0, ax1, 2, x[0], x[1], vals)
        d = x[0] - lo[0]
        for i in range(dim):
            di = x[i] - lo[i]
            if di < d:
                d = di
            di = hi[i] - x[i]
            if di < d:
                d = di
        dn = 0.0
        for i in range(dim):
            dn += vals[i] * vals[i]
        dn = math.sqrt(dn)
        dt = dt_base
        lim = eps_b * d * d / (vals[i_anorm] + d * dn + 1e-300)
        if lim < dt:
            dt = lim
        if dt < dt_floor:
            dt = dt_floor
        if t + dt > t_out:
            dt = t_out - t
        accepted = False
        p0 = 0.0
        p1 = 0.0
        for _ in range(_MAX_HALVINGS + 1):
            if nptr + qdim > noise.shape[0]:
                return 1, t, nptr
            sq = math.sqrt(dt)
            p0 = x[0] + vals[0] * dt
            for j in range(qdim):
                p0 += sq * vals[i_sig + j] * noise[nptr + j]
            if dim == 2:
                p1 = x[1] + vals[1] * dt
                for j in range(qdim):
                    p1 += sq * vals[i_sig + qdim + j] * noise[nptr + j]
            nptr += qdim
            inside = lo[0] < p0 < hi[0]
            if dim == 2:
                inside = inside and (lo[1] < p1 < hi[1])
            if inside:
                accepted = True
                break
            dt *= 0.5
        if not accepted:
            return 2, t, nptr
        costs[0] += vals[i_cu] * dt
        costs[1] += vals[i_cc] * dt
        x[0] = p0
        if dim == 2:
            x[1] = p1
        t += dt
    return 0, t, nptr


_DUMMY_AXIS = np.zeros(2)


def _controlled_path(field: ControlField, x0, cfg: SimConfig, path_index,
                     record: bool):
    dom = field.domain
    lo = np.asarray(dom.lower, dtype=float)
    hi = np.asarray(dom.upper, dtype=float)
    gen = _path_generator(cfg.master_seed, path_index)
    noise = gen.standard_normal(_NOISE_BUFFER)
    nptr = 0

    stride = cfg.stride()
    n_out = int(math.ceil(cfg.t_max / stride - 1e-12))
    times = np.concatenate([[0.0], stride * np.arange(1, n_out + 1)])
    times[-1] = cfg.t_max

    x = np.array(x0, dtype=float)
    t = 0.0
    costs = np.zeros(2)
    violations = 0
    exit_time = np.inf

    states = np.empty((n_out + 1, field.dim)) if record else None
    cu = np.empty(n_out + 1) if record else None
    cc = np.empty(n_out + 1) if record else None
    if record:
        states[0] = x
        cu[0] = 0.0
        cc[0] = 0.0

    ax1 = field.axes[1] if field.dim == 2 else _DUMMY_AXIS
    frozen = False
    for k in range(1, n_out + 1):
        t_out = times[k]
        while not frozen and t < t_out - 1e-12:
            status, t, nptr = _advance(
                x, t, t_out, costs, field.data, field.axes[0], ax1,
                field.dim, field.noise_dim, lo, hi, cfg.dt_base,
                cfg.boundary_safety, cfg.dt_base * _DT_FLOOR, noise, nptr,
            )
            if status == 1:
                noise = gen.standard_normal(_NOISE_BUFFER)
                nptr = 0
            elif status == 2:
                violations += 1
                exit_time = t
                frozen = True
        if record:
            states[k] = x
            cu[k] = costs[0]
            cc[k] = costs[1]
    return x, t, costs, violations, exit_time, times, states, cu, cc


def simulate_controlled(field: ControlField, x0, cfg: SimConfig) -> Trajectory:
    """Single controlled path recorded at the output stride."""
    x0 = np.asarray(x0, dtype=float)
    if not bool(field.domain.contains(x0, closed=False)):
        raise ValueError("x0 must lie in the open domain")
    (_, _, _, violations, exit_time, times, states, cu, cc) = _controlled_path(
        field, x0, cfg, 0, record=True
    )
    return Trajectory(
        times=times,
        states=states,
        exit_time=exit_time,
        exited=math.isfinite(exit_time),
        violations=violations,
        cost_control=cu,
        cost_potential=cc,
    )


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def run_ensemble(kind: str, model: CoefficientModel, domain: BoxDomain, x0,
                 cfg: SimConfig, n_paths: int,
                 field: ControlField | None = None,
                 chunk_size: int = 4096) -> TrajectoryEnsemble:
    """Simulate n_paths independent paths and return per-path summaries.

    kind is "killed" (field ignored) or one of "Y"/"Z" (field required;
    its own kind tag must match).  x0 is a single state or an
    (n_paths, dim) array of per-path starts.  Results are independent of
    chunk_size and n_workers by the per-path seeding contract.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if kind == "killed":
        dim = model.dim
    elif kind in ("Y", "Z"):
        if field is None:
            raise ValueError("controlled ensembles need a control field")
        if field.kind != kind:
            raise ValueError(f"field kind {field.kind!r} does not match {kind!r}")
        dim = field.dim
        domain = field.domain
    else:
        raise ValueError(f"unknown ensemble kind {kind!r}")

    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0s = np.broadcast_to(x0, (n_paths, dim))
    else:
        if x0.shape != (n_paths, dim):
            raise ValueError("per-path starts must have shape (n_paths, dim)")
        x0s = x0
    if not np.all(domain.contains(x0s, closed=False)):
        raise ValueError("all starts must lie in the open domain")

    chunks = [
        np.arange(s, min(s + chunk_size, n_paths))
        for s in range(0, n_paths, chunk_size)
    ]

    if kind == "killed":
        n_steps = int(math.ceil(cfg.t_max / cfg.dt_base - 1e-12))

        def work(idx):
            return _killed_chunk(
                model, domain, x0s[idx], cfg.dt_base, n_steps,
                cfg.master_seed, idx,
            )

        parts = _map_chunks(work, chunks, cfg.n_workers)
        exit_times = np.concatenate([p[0] for p in parts])
        finals = np.concatenate([p[1] for p in parts])
        return TrajectoryEnsemble(
            kind=kind,
            n_paths=n_paths,
            master_seed=cfg.master_seed,
            t_max=n_steps * cfg.dt_base,
            exit_times=exit_times,
            exited=np.isfinite(exit_times),
            violations=np.zeros(n_paths, dtype=np.int64),
            final_states=finals,
        )

    def work(idx):
        out = np.empty((idx.size, dim))
        et = np.empty(idx.size)
        vi = np.empty(idx.size, dtype=np.int64)
        co = np.empty((idx.size, 2))
        for r, i in enumerate(idx):
            x, _, costs, violations, exit_time, *_ = _controlled_path(
                field, x0s[i], cfg, i, record=False
            )
            out[r] = x
            et[r] = exit_time
            vi[r] = violations
            co[r] = costs
        return et, out, vi, co

    parts = _map_chunks(work, chunks, cfg.n_workers)
    exit_times = np.concatenate([p[0] for p in parts])
    return TrajectoryEnsemble(
        kind=kind,
        n_paths=n_paths,
        master_seed=cfg.master_seed,
        t_max=cfg.t_max,
        exit_times=exit_times,
        exited=np.isfinite(exit_times),
        violations=np.concatenate([p[2] for p in parts]),
        final_states=np.concatenate([p[1] for p in parts]),
        final_costs=np.concatenate([p[3] for p in parts]),
    )


def _map_chunks(work, chunks, n_workers):
    if n_workers == 1 or len(chunks) == 1:
        return [work(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(work, chunks))


# ---------------------------------------------------------------------------
# occupation statistics and QSD sampling
# ---------------------------------------------------------------------------


def occupation_histogram(source, grid: Grid, burn_in: float | None = None):
    """Time-average occupation density on the grid's node cells.

    source is a recorded Trajectory or an iterable of them; samples at the
    recording stride past the burn-in window are binned to the nearest node
    and normalized so that sum(density * cell_volume) = 1.  Default burn-in
    is max(10 time units, 5% of the horizon), capped below the horizon.
    """
    trajs = [source] if isinstance(source, Trajectory) else list(source)
    if not trajs:
        raise ValueError("no trajectories given")
    lower = np.asarray(grid.domain.lower)
    counts = np.zeros(grid.shape)
    total = 0
    for tr in trajs:
        horizon = tr.times[-1]
        b = burn_in if burn_in is not None else min(
            max(10.0, 0.05 * horizon), 0.5 * horizon
        )
        keep = tr.times > b
        if tr.exited:
            keep &= tr.times <= tr.exit_time
        pts = tr.states[keep]
        if pts.shape[0] == 0:
            continue
        idx = np.rint((pts - lower) / grid.h).astype(np.int64)
        for k, n in enumerate(grid.shape):
            np.clip(idx[:, k], 0, n - 1, out=idx[:, k])
        np.add.at(counts, tuple(idx.T), 1.0)
        total += pts.shape[0]
    if total == 0:
        raise ValueError("burn-in leaves no retained samples")
    return counts / total / grid.weights


def sample_qsd_starts(qsd, n: int, master_seed: int) -> np.ndarray:
    """Draw n initial states from the discrete QSD.

    Inverse-CDF over node cells of nu, then uniform jitter within the cell.
    Boundary nodes carry zero mass, so the jittered points stay inside the
    open box.  Uses the reserved stream, never a path stream.
    """
    grid: Grid = qsd.grid
    nu = np.asarray(qsd.nu, dtype=float)
    cdf = np.cumsum(nu)
    cdf /= cdf[-1]
    gen = _path_generator(master_seed, _INIT_STREAM)
    u = gen.random(n)
    idx = np.searchsorted(cdf, u, side="right")
    nodes = grid.node_coordinates()[idx]
    jitter = (gen.random((n, grid.dim)) - 0.5) * grid.h
    return nodes + jitter
