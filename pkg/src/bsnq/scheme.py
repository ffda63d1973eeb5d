"""Fully implicit time Euler stepping for the stochastic Boussinesq pair.

Per step, with mesh h = T/N and previous state (u_prev, th_prev):

    u_new + h*nu*A u_new + h*B(u_new, u_new)
        = u_prev + h*Pi(th_prev * e2) + G(u_prev) dW,
    th_new + h*kappa*Lap th_new + h*(u_prev . grad) th_new
        = th_prev + Gt(th_prev) dWt,

posed in the dealiased Fourier band (the Galerkin space). The nonlinear
velocity equation is solved by Picard iteration preconditioned with the
diffusion-implicit resolvent:

    u^(i+1) = (I + h*nu*A)^(-1) [rhs - h*B(u^(i), u^(i))],   u^(0) = u_prev,

and likewise for the temperature with the advecting field frozen at u_prev
(the equation is then linear in th_new; the iteration handles the advection
term). Because the resolvent inverts its factor exactly per mode, the
equation residual of the i-th iterate is exactly h*||B(u^(i)) - B(u^(i-1))||,
which is the convergence measure. Non-convergence raises PicardDiverged with
the residual trace: it is a meaningful signal that h is too large for the
realized noise, never hidden.

The computed solution is *defined* as this Picard limit; iteration counts are
recorded so that any sensitivity (the Galerkin solutions of the implicit
system need not be unique) would surface as tolerance-dependent drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import pi

import numpy as np

from .nonlinear import AdvectionWorkspace, advect_vector, dealias
from .noise import (
    DiffusionSpec,
    WienerPath,
    aggregate_increments,
    apply_diffusion,
)
from .spectral import (
    SpectralScalarField,
    SpectralVectorField,
    TorusGrid,
    inner_product,
    leray_project,
    random_scalar_field,
    random_vector_field,
    resolvent,
    sobolev_norm,
    to_spectral,
    vector_to_spectral,
)

__all__ = [
    "SchemeConfig",
    "SchemeState",
    "TrajectoryStats",
    "StoredTrajectory",
    "PicardDiverged",
    "step",
    "energy_residual",
    "energy_scales",
    "run_trajectory",
    "buoyancy_force",
    "taylor_green_velocity",
    "thermal_stripe",
    "gaussian_initial_data",
    "build_initial_data",
]


@dataclass(frozen=True)
class SchemeConfig:
    nu: float
    kappa: float
    T: float
    N: int
    grid: TorusGrid
    picard_tol: float = 1e-10
    picard_max_iter: int = 100
    include_advection: bool = True  # diagnostic switch; True in production

    def __post_init__(self):
        for name in ("nu", "kappa", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")

    @property
    def h(self) -> float:
        return self.T / self.N


@dataclass(frozen=True)
class SchemeState:
    index: int
    u: SpectralVectorField
    theta: SpectralScalarField
    picard_iters_used: int = 0


class PicardDiverged(RuntimeError):
    """Fixed-point iteration failed to reach tolerance; h too large for the noise."""

    def __init__(self, stage: str, iterations: int, residual_trace: list[float],
                 step_index: int | None = None):
        self.stage = stage
        self.iterations = iterations
        self.residual_trace = residual_trace
        self.step_index = step_index
        where = f" at step {step_index}" if step_index is not None else ""
        super().__init__(
            f"Picard iteration for the {stage} equation did not converge in "
            f"{iterations} iterations{where}; last residual {residual_trace[-1]:.3e}"
        )


@dataclass
class TrajectoryStats:
    """Running sup/dissipation functionals of a scheme trajectory.

    sup_* hold squared norms maximized over all visited states (including the
    initial one); diss_* are the h-weighted sums over steps l >= 1. Energy
    residual lists store the per-step identity defect divided by its scale.
    """

    sup_V0_u: float = 0.0
    sup_H0_theta: float = 0.0
    sup_V1_u: float = 0.0
    sup_H1_theta: float = 0.0
    diss_u: float = 0.0
    diss_theta: float = 0.0
    energy_res_u: list = field(default_factory=list)
    energy_res_theta: list = field(default_factory=list)
    picard_iters: list = field(default_factory=list)

    def observe_state(self, state: SchemeState, h: float, initial: bool = False):
        u_sq = sobolev_norm(state.u, 0.0) ** 2
        t_sq = sobolev_norm(state.theta, 0.0) ** 2
        gu_sq = sobolev_norm(state.u, 1.0) ** 2
        gt_sq = sobolev_norm(state.theta, 1.0) ** 2
        self.sup_V0_u = max(self.sup_V0_u, u_sq)
        self.sup_H0_theta = max(self.sup_H0_theta, t_sq)
        self.sup_V1_u = max(self.sup_V1_u, gu_sq)
        self.sup_H1_theta = max(self.sup_H1_theta, gt_sq)
        if not initial:
            self.diss_u += h * gu_sq
            self.diss_theta += h * gt_sq
            self.picard_iters.append(state.picard_iters_used)

    def as_dict(self) -> dict:
        return {
            "sup_V0_u": self.sup_V0_u,
            "sup_H0_theta": self.sup_H0_theta,
            "sup_V1_u": self.sup_V1_u,
            "sup_H1_theta": self.sup_H1_theta,
            "diss_u": self.diss_u,
            "diss_theta": self.diss_theta,
            "energy_res_u": list(self.energy_res_u),
            "energy_res_theta": list(self.energy_res_theta),
            "picard_iters": list(self.picard_iters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStats":
        out = cls()
        for k, v in d.items():
            setattr(out, k, v)
        return out


@dataclass
class StoredTrajectory:
    """A trajectory with states kept at selected step indices, for error analysis."""

    N: int
    T: float
    seed: int
    states: dict  # step index -> SchemeState
    stats: TrajectoryStats

    @property
    def h(self) -> float:
        return self.T / self.N


def buoyancy_force(theta: SpectralScalarField) -> SpectralVectorField:
    """Pi(theta * e2): temperature forcing the vertical velocity component."""
    g = theta.grid
    c = np.zeros((2, g.K, g.K), dtype=complex)
    c[1] = theta.coeffs
    return leray_project(SpectralVectorField(g, c))


def _solve_velocity(prev: SchemeState, rhs: SpectralVectorField, cfg: SchemeConfig):
    h, lam = cfg.h, cfg.h * cfg.nu
    if not cfg.include_advection:
        return resolvent(rhs, lam), 1, [0.0]
    u_cur = prev.u
    b_cur = advect_vector(u_cur, u_cur)
    trace = []
    for it in range(1, cfg.picard_max_iter + 1):
        u_new = resolvent(rhs - h * b_cur, lam)
        b_new = advect_vector(u_new, u_new)
        res = h * sobolev_norm(b_new - b_cur, 0.0)
        trace.append(res)
        if res <= cfg.picard_tol * (1.0 + sobolev_norm(u_new, 0.0)):
            return u_new, it, trace
        u_cur, b_cur = u_new, b_new
    raise PicardDiverged("velocity", cfg.picard_max_iter, trace)


def _solve_temperature(prev: SchemeState, rhs: SpectralScalarField, cfg: SchemeConfig):
    h, lam = cfg.h, cfg.h * cfg.kappa
    if not cfg.include_advection:
        return resolvent(rhs, lam), 1, [0.0]
    ws = AdvectionWorkspace(cfg.grid).load_velocity(prev.u)
    th_cur = prev.theta
    a_cur = ws.advect_scalar(th_cur)
    trace = []
    for it in range(1, cfg.picard_max_iter + 1):
        th_new = resolvent(rhs - h * a_cur, lam)
        a_new = ws.advect_scalar(th_new)
        res = h * sobolev_norm(a_new - a_cur, 0.0)
        trace.append(res)
        if res <= cfg.picard_tol * (1.0 + sobolev_norm(th_new, 0.0)):
            return th_new, it, trace
        th_cur, a_cur = th_new, a_new
    raise PicardDiverged("temperature", cfg.picard_max_iter, trace)


def _step_full(prev: SchemeState, dw_row: np.ndarray, dwt_row: np.ndarray,
               cfg: SchemeConfig, gspec: DiffusionSpec, gtspec: DiffusionSpec):
    g = cfg.grid
    h = cfg.h
    noise_u = apply_diffusion(gspec, prev.u, dw_row)
    noise_t = apply_diffusion(gtspec, prev.theta, dwt_row)
    rhs_u = prev.u + h * buoyancy_force(prev.theta) + noise_u
    u_new, iters_u, _ = _solve_velocity(prev, rhs_u, cfg)
    rhs_t = prev.theta + noise_t
    th_new, iters_t, _ = _solve_temperature(prev, rhs_t, cfg)
    state = SchemeState(prev.index + 1, u_new, th_new, iters_u + iters_t)
    return state, noise_u, noise_t


def step(prev: SchemeState, dw_row: np.ndarray, dwt_row: np.ndarray,
         cfg: SchemeConfig, gspec: DiffusionSpec, gtspec: DiffusionSpec) -> SchemeState:
    """Advance one implicit Euler step given one increment row per noise."""
    state, _, _ = _step_full(prev, dw_row, dwt_row, cfg, gspec, gtspec)
    return state


def energy_residual(prev: SchemeState, next_state: SchemeState, cfg: SchemeConfig,
                    noise_u: SpectralVectorField,
                    noise_theta: SpectralScalarField) -> tuple[float, float]:
    """Defects of the per-step discrete energy identities.

    Velocity: 1/2 [||u^l||^2 - ||u^(l-1)||^2 + ||u^l - u^(l-1)||^2]
              + h*nu*||A^(1/2) u^l||^2
              - h*(Pi th^(l-1) e2, u^l) - (G dW, u^l)  -> 0,
    and the analogous temperature identity without the buoyancy pairing.
    Both vanish up to the Picard solve tolerance; the floor traces how far the
    computed states are from exactly satisfying the scheme.
    """
    h = cfg.h
    u0, u1 = prev.u, next_state.u
    t0, t1 = prev.theta, next_state.theta
    lhs_u = 0.5 * (
        sobolev_norm(u1, 0.0) ** 2 - sobolev_norm(u0, 0.0) ** 2
        + sobolev_norm(u1 - u0, 0.0) ** 2
    ) + h * cfg.nu * sobolev_norm(u1, 1.0) ** 2
    rhs_u = h * inner_product(buoyancy_force(t0), u1) + inner_product(noise_u, u1)
    lhs_t = 0.5 * (
        sobolev_norm(t1, 0.0) ** 2 - sobolev_norm(t0, 0.0) ** 2
        + sobolev_norm(t1 - t0, 0.0) ** 2
    ) + h * cfg.kappa * sobolev_norm(t1, 1.0) ** 2
    rhs_t = inner_product(noise_theta, t1)
    return abs(lhs_u - rhs_u), abs(lhs_t - rhs_t)


def energy_scales(prev: SchemeState, next_state: SchemeState,
                  cfg: SchemeConfig) -> tuple[float, float]:
    """Natural magnitudes against which the identity defects are judged."""
    h = cfg.h
    scale_u = (
        1.0
        + sobolev_norm(next_state.u, 0.0) ** 2
        + sobolev_norm(prev.u, 0.0) ** 2
        + h * cfg.nu * sobolev_norm(next_state.u, 1.0) ** 2
    )
    scale_t = (
        1.0
        + sobolev_norm(next_state.theta, 0.0) ** 2
        + sobolev_norm(prev.theta, 0.0) ** 2
        + h * cfg.kappa * sobolev_norm(next_state.theta, 1.0) ** 2
    )
    return scale_u, scale_t


def _normalize_store(store, N: int):
    if store is None:
        return None
    if store == "all":
        return set(range(N + 1))
    return set(int(i) for i in store)


def run_trajectory(u0: SpectralVectorField, theta0: SpectralScalarField,
                   path_u: WienerPath, path_theta: WienerPath, N: int,
                   cfg: SchemeConfig, gspec: DiffusionSpec, gtspec: DiffusionSpec,
                   store=None, audit_energy: bool = True, on_step=None,
                   resume_from=None):
    """Run N implicit Euler steps driven by increments aggregated to mesh N.

    Returns (final state, TrajectoryStats, stored states or None). `store`
    may be None, "all", or an iterable of step indices; `on_step(state, stats)`
    is invoked after every completed step (checkpoint hook); `resume_from` is
    an optional (state, stats) pair from a mid-trajectory checkpoint, in which
    case stepping continues from state.index + 1. Deterministic given the
    paths; PicardDiverged propagates with its step index attached.
    """
    if path_u.N_max % N != 0 or path_theta.N_max % N != 0:
        raise ValueError(f"N={N} does not divide the path mesh")
    cfg = replace(cfg, N=N)
    dw = aggregate_increments(path_u, N)
    dwt = aggregate_increments(path_theta, N)
    keep = _normalize_store(store, N)
    stored = {} if keep is not None else None
    if resume_from is None:
        state = SchemeState(0, dealias(leray_project(u0)), dealias(theta0))
        stats = TrajectoryStats()
        stats.observe_state(state, cfg.h, initial=True)
        start = 1
    else:
        state, stats = resume_from
        start = state.index + 1
    if keep is not None and resume_from is None and 0 in keep:
        stored[0] = state
    for l in range(start, N + 1):
        prev = state
        try:
            state, noise_u, noise_t = _step_full(prev, dw[l - 1], dwt[l - 1],
                                                 cfg, gspec, gtspec)
        except PicardDiverged as err:
            err.step_index = l
            raise
        stats.observe_state(state, cfg.h)
        if audit_energy:
            res_u, res_t = energy_residual(prev, state, cfg, noise_u, noise_t)
            scale_u, scale_t = energy_scales(prev, state, cfg)
            stats.energy_res_u.append(res_u / scale_u)
            stats.energy_res_theta.append(res_t / scale_t)
        if keep is not None and l in keep:
            stored[l] = state
        if on_step is not None:
            on_step(state, stats)
    return state, stats, stored


# ---------------------------------------------------------------------------
# initial data


def taylor_green_velocity(grid: TorusGrid, amplitude: float = 1.0) -> SpectralVectorField:
    """Divergence-free cellular flow: A (sin x' cos y', -cos x' sin y'), x' = 2 pi x / L."""
    X, Y = grid.physical_mesh()
    w = 2.0 * pi / grid.L
    samples = np.stack([
        amplitude * np.sin(w * X) * np.cos(w * Y),
        -amplitude * np.cos(w * X) * np.sin(w * Y),
    ])
    return leray_project(vector_to_spectral(samples, grid))


def thermal_stripe(grid: TorusGrid, amplitude: float = 1.0) -> SpectralScalarField:
    """Mean-zero stripe B sin(2 pi x / L); its buoyancy is fully divergence-free."""
    X, _ = grid.physical_mesh()
    return to_spectral(amplitude * np.sin(2.0 * pi * X / grid.L), grid)


def gaussian_initial_data(grid: TorusGrid, seed: int, decay: float = 3.0,
                          kmax: int | None = None, amplitude_u: float = 1.0,
                          amplitude_theta: float = 0.5):
    """Random band-limited fields with |k|-decaying spectrum, scaled to a
    prescribed H^1 seminorm."""
    rng = np.random.default_rng([seed, 2])
    kmax = min(grid.dealias_cutoff, 8) if kmax is None else kmax
    u = random_vector_field(grid, rng, kmax=kmax, decay=decay)
    th = random_scalar_field(grid, rng, kmax=kmax, decay=decay)
    gu = sobolev_norm(u, 1.0)
    gt = sobolev_norm(th, 1.0)
    if gu > 0:
        u = u * (amplitude_u / gu)
    if gt > 0:
        th = th * (amplitude_theta / gt)
    return u, th


def build_initial_data(grid: TorusGrid, block: dict):
    """Construct (u0, theta0) from a validated initial-data config block."""
    kind = block.get("kind", "taylor_green")
    amp_u = float(block.get("amplitude_u", 1.0))
    amp_t = float(block.get("amplitude_theta", 0.5))
    if kind == "taylor_green":
        return taylor_green_velocity(grid, amp_u), thermal_stripe(grid, amp_t)
    if kind == "gaussian":
        kmax = block.get("kmax")
        return gaussian_initial_data(
            grid,
            seed=int(block.get("seed", 0)),
            decay=float(block.get("decay", 3.0)),
            kmax=None if kmax is None else int(kmax),
            amplitude_u=amp_u,
            amplitude_theta=amp_t,
        )
    raise ValueError(f"unknown initial data kind {kind!r}")
