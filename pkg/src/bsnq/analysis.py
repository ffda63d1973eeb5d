"""Error functionals against coupled references, localization, and rate fits.

Errors always compare a coarse trajectory with a fine-mesh reference driven by
the *same* Wiener path (verified through stored seeds), so the measured
quantity is time-discretization error only. The localization indicator is
evaluated on the reference trajectory's discrete times, the computable
substitute for the continuous sup.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .scheme import StoredTrajectory, TrajectoryStats
from .spectral import sobolev_norm

__all__ = [
    "ErrorReport",
    "LocalizationConfig",
    "RateFit",
    "RateConstants",
    "compute_errors",
    "estimate_strong_rate",
    "estimate_probability_rate",
    "ProbabilityRow",
    "wilson_interval",
    "mean_squared_increments",
    "estimate_increment_exponent",
    "moment_table",
    "MomentRow",
    "log_rate_projection",
]


@dataclass
class ErrorReport:
    """Per-mesh error functionals of one coupled (coarse, reference) pair."""

    N: int
    seed: int
    times: np.ndarray
    err_u_sq: np.ndarray      # ||e_j||^2 at the coarse times, j = 0..N
    err_theta_sq: np.ndarray
    max_sq_error: float       # max_j (||e_j||^2 + ||e~_j||^2)
    gradient_error_sum: float  # (T/N) sum_j (||A^(1/2)e_j||^2 + ||L^(1/2)e~_j||^2)
    localized: bool
    M_used: float

    @property
    def h(self) -> float:
        return float(self.times[-1]) / self.N


@dataclass(frozen=True)
class LocalizationConfig:
    """Threshold M for the event that the reference H^1 functionals stay below M."""

    M: float

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("localization threshold M must be positive")

    def indicator(self, reference_stats: TrajectoryStats) -> bool:
        return (reference_stats.sup_V1_u <= self.M
                and reference_stats.sup_H1_theta <= self.M)


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    residuals: np.ndarray


@dataclass(frozen=True)
class RateConstants:
    """Exponents and constants entering the localized error bound.

    The localization constant is 9(1+gamma) C4^2 / 8 * max(5/nu, 1/kappa) * M,
    with C4 the empirical Gagliardo-Nirenberg constant of the grid; reports
    show exp(constant * T) so the theoretical amplification is visible.
    """

    eta: float
    gamma: float
    c4_bar: float
    nu: float
    kappa: float
    M: float

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("target exponent eta must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("slack gamma must be positive")

    @property
    def localization_constant(self) -> float:
        return (9.0 * (1.0 + self.gamma) * self.c4_bar**2 / 8.0
                * max(5.0 / self.nu, 1.0 / self.kappa) * self.M)

    def error_amplification(self, T: float) -> float:
        return float(np.exp(self.localization_constant * T))


def compute_errors(coarse: StoredTrajectory, reference: StoredTrajectory,
                   loc: LocalizationConfig) -> ErrorReport:
    """Errors of the coarse run against the reference at the coarse grid times."""
    if coarse.seed != reference.seed:
        raise ValueError(
            f"path identity mismatch: coarse seed {coarse.seed}, "
            f"reference seed {reference.seed}"
        )
    if reference.N % coarse.N != 0:
        raise ValueError(
            f"coarse mesh N={coarse.N} does not divide reference mesh N={reference.N}"
        )
    if abs(coarse.T - reference.T) > 1e-14 * max(coarse.T, reference.T):
        raise ValueError("trajectories cover different horizons")
    ratio = reference.N // coarse.N
    N = coarse.N
    times = np.arange(N + 1) * (coarse.T / N)
    err_u = np.zeros(N + 1)
    err_t = np.zeros(N + 1)
    grad_sum = 0.0
    for j in range(N + 1):
        try:
            cj = coarse.states[j]
            rj = reference.states[j * ratio]
        except KeyError as exc:
            raise ValueError(f"missing stored state for comparison: {exc}") from exc
        eu = rj.u - cj.u
        et = rj.theta - cj.theta
        err_u[j] = sobolev_norm(eu, 0.0) ** 2
        err_t[j] = sobolev_norm(et, 0.0) ** 2
        if j >= 1:
            grad_sum += sobolev_norm(eu, 1.0) ** 2 + sobolev_norm(et, 1.0) ** 2
    grad_sum *= coarse.h
    return ErrorReport(
        N=N,
        seed=coarse.seed,
        times=times,
        err_u_sq=err_u,
        err_theta_sq=err_t,
        max_sq_error=float(np.max(err_u + err_t)),
        gradient_error_sum=float(grad_sum),
        localized=loc.indicator(reference.stats),
        M_used=loc.M,
    )


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> RateFit:
    if np.any(np.asarray(y) <= 0):
        raise ValueError("log-log fit requires strictly positive values")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    fitted = slope * lx + intercept
    resid = ly - fitted
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), r2, resid)


def estimate_strong_rate(reports_by_N: dict) -> RateFit:
    """OLS slope of log(mean localized max_sq_error) against log(T/N).

    Requires at least 3 mesh levels with at least one localized sample each;
    a level losing every sample to localization is an error, never silently
    dropped.
    """
    if len(reports_by_N) < 3:
        raise ValueError("need at least 3 mesh levels for a rate fit")
    hs, means = [], []
    for N in sorted(reports_by_N):
        reports = [r for r in reports_by_N[N] if r.localized]
        if not reports:
            raise ValueError(f"all samples at N={N} were excluded by localization")
        hs.append(reports[0].h)
        means.append(float(np.mean([r.max_sq_error for r in reports])))
    return _loglog_fit(np.array(hs), np.array(means))


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval for a binomial proportion (95% default)."""
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return center - half, center + half


@dataclass
class ProbabilityRow:
    N: int
    eta: float
    p_hat: float
    ci_halfwidth: float
    ci_lo: float
    ci_hi: float
    n_paths: int


def estimate_probability_rate(reports_by_N: dict, eta: float) -> list[ProbabilityRow]:
    """Empirical P[max_sq_error + gradient_error_sum >= N^(-eta)] per mesh."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    rows = []
    for N in sorted(reports_by_N):
        reports = reports_by_N[N]
        n = len(reports)
        threshold = N ** (-eta)
        hits = sum(
            1 for r in reports
            if r.max_sq_error + r.gradient_error_sum >= threshold
        )
        lo, hi = wilson_interval(hits, n)
        rows.append(ProbabilityRow(N=N, eta=eta, p_hat=hits / n,
                                   ci_halfwidth=(hi - lo) / 2, ci_lo=lo, ci_hi=hi,
                                   n_paths=n))
    return rows


def mean_squared_increments(u_states: list, theta_states: list,
                            lag_steps: list[int], h: float):
    """Per-lag mean of squared V0/H0 increments over all start times of one path.

    Returns (deltas, msq_u, msq_theta).
    """
    u_stack = np.stack([s.coeffs for s in u_states])
    t_stack = np.stack([s.coeffs for s in theta_states])
    L = u_states[0].grid.L
    deltas = np.array([lag * h for lag in lag_steps])
    msq_u = np.empty(len(lag_steps))
    msq_t = np.empty(len(lag_steps))
    for i, lag in enumerate(lag_steps):
        if lag < 1 or lag >= len(u_states):
            raise ValueError(f"lag {lag} outside the stored trajectory")
        du = u_stack[lag:] - u_stack[:-lag]
        dt = t_stack[lag:] - t_stack[:-lag]
        msq_u[i] = L**2 * float(np.mean(np.sum(np.abs(du) ** 2, axis=(1, 2, 3))))
        msq_t[i] = L**2 * float(np.mean(np.sum(np.abs(dt) ** 2, axis=(1, 2))))
    return deltas, msq_u, msq_t


def estimate_increment_exponent(deltas: np.ndarray, tables_u: list,
                                tables_theta: list) -> tuple[RateFit, RateFit]:
    """Fit log E||x(t+d) - x(t)||^2 against log d for velocity and temperature.

    tables_* hold one per-path array of per-lag means; the ensemble mean is
    fitted. Requires at least 3 lags.
    """
    deltas = np.asarray(deltas, dtype=float)
    if len(deltas) < 3:
        raise ValueError("need at least 3 lags for an increment fit")
    mean_u = np.mean(np.stack(tables_u), axis=0)
    mean_t = np.mean(np.stack(tables_theta), axis=0)
    return _loglog_fit(deltas, mean_u), _loglog_fit(deltas, mean_t)


_FUNCTIONALS = ("sup_u_V0", "sup_u_V1", "sup_theta_H0", "sup_theta_H1",
                "diss_u", "diss_theta")


@dataclass
class MomentRow:
    N: int
    order: int
    functional: str
    estimate: float
    stderr: float


def _functional_value(stats: TrajectoryStats, name: str) -> float:
    return {
        "sup_u_V0": stats.sup_V0_u,
        "sup_u_V1": stats.sup_V1_u,
        "sup_theta_H0": stats.sup_H0_theta,
        "sup_theta_H1": stats.sup_H1_theta,
        "diss_u": stats.diss_u,
        "diss_theta": stats.diss_theta,
    }[name]


def moment_table(stats_by_N: dict, orders=(2, 4, 8)) -> list[MomentRow]:
    """Monte-Carlo moment estimates per mesh, functional, and order.

    Functional values are squared-norm quantities (sup of squared norms,
    h-weighted squared-gradient sums); order q reports E[value^(q/2)], i.e.
    the q-th moment of the underlying norm. Standard errors are sample
    standard deviations of the powered values over paths divided by sqrt(P).
    """
    rows = []
    for N in sorted(stats_by_N):
        ensemble = stats_by_N[N]
        if not ensemble:
            raise ValueError(f"empty ensemble at N={N}")
        for name in _FUNCTIONALS:
            values = np.array([_functional_value(s, name) for s in ensemble])
            for q in orders:
                powered = values ** (q / 2)
                est = float(powered.mean())
                se = float(powered.std(ddof=1) / sqrt(len(powered))) if len(powered) > 1 else 0.0
                rows.append(MomentRow(N=N, order=q, functional=name,
                                      estimate=est, stderr=se))
    return rows


def log_rate_projection(q: int, N_values, measured=None):
    """Logarithmic strong-rate envelope C * (ln N)^(-(2^(q-1)+1)).

    With measured unlocalized errors supplied, C is fitted by least squares in
    log space; otherwise C = 1. Returns (envelope array, C, exponent).
    """
    if q < 3:
        raise ValueError("q must be >= 3")
    N_values = np.asarray(N_values, dtype=float)
    if np.any(N_values <= 1):
        raise ValueError("N values must exceed 1 so that ln N > 0")
    exponent = -(2 ** (q - 1) + 1)
    base = np.log(N_values) ** exponent
    if measured is None:
        C = 1.0
    else:
        measured = np.asarray(measured, dtype=float)
        C = float(np.exp(np.mean(np.log(measured) - np.log(base))))
    return C * base, C, exponent
