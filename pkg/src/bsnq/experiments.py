"""Experiment configuration and Monte-Carlo campaign orchestration.

Campaigns distribute path indices over a worker pool; a path's entire
computation (reference run, coarse runs, error functionals) happens in one
worker from the per-path seed base_seed + p, so worker count and scheduling
cannot perturb results. Per-path outcomes are persisted as JSON partials
(which also provide interrupt/resume), then aggregated in sorted order into
the fixed-schema CSVs. Diverged paths are recorded in failures.csv and
excluded from fits; the campaign exits 3 when more than 5% of paths fail.
"""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .analysis import (
    ErrorReport,
    LocalizationConfig,
    RateConstants,
    compute_errors,
    estimate_increment_exponent,
    estimate_probability_rate,
    estimate_strong_rate,
    mean_squared_increments,
    moment_table,
)
from .checkpoint import (
    load_trajectory_checkpoint,
    save_field,
    save_trajectory_checkpoint,
    save_wiener_path,
)
from .noise import (
    CovarianceSpec,
    DiffusionSpec,
    diffusion_preset,
    sample_path,
    verify_growth_lipschitz,
)
from .scheme import (
    PicardDiverged,
    SchemeConfig,
    StoredTrajectory,
    build_initial_data,
    run_trajectory,
)
from .spectral import TorusGrid, gagliardo_nirenberg_constant

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "run_converge",
    "run_moments",
    "run_increments",
    "run_selftest",
    "run_simulate",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

_FAILURE_THRESHOLD = 0.05


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "grid": {"K": 64, "L": 2.0 * np.pi, "dealias_cutoff": None},
    "scheme": {"nu": 1.0, "kappa": 1.0, "T": 1.0,
               "picard_tol": 1e-10, "picard_max_iter": 100},
    "covariance_u": {"law": "power_law", "alpha": 2.0, "J": 32},
    "covariance_theta": {"law": "power_law", "alpha": 2.0, "J": 32},
    "diffusion_u": {"family": "diagonal_multiplicative", "gain": 0.25, "cap": 1.0},
    "diffusion_theta": {"family": "diagonal_multiplicative", "gain": 0.25, "cap": 1.0},
    "initial": {"kind": "taylor_green", "amplitude_u": 1.0, "amplitude_theta": 0.5},
    "mesh": {"N_list": [16, 32, 64, 128, 256], "N_ref": 1024},
    "paths": 64,
    "base_seed": 1234,
    "localization": {"M": 50.0},
    "eta": 0.8,
    "increments": {"N_fine": 512, "lag_steps": [1, 2, 4, 8, 16, 32]},
}

_COV_KEYS = {"law", "alpha", "gamma", "values", "J"}
_DIFF_KEYS = {"family", "gain", "cap", "constants"}
_INITIAL_KEYS = {"kind", "amplitude_u", "amplitude_theta", "decay", "kmax", "seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    grid: TorusGrid
    nu: float
    kappa: float
    T: float
    picard_tol: float
    picard_max_iter: int
    cov_u: CovarianceSpec
    cov_theta: CovarianceSpec
    diff_u: DiffusionSpec
    diff_theta: DiffusionSpec
    initial: tuple
    N_list: tuple
    N_ref: int
    paths: int
    base_seed: int
    M: float
    eta: float
    increments_N_fine: int
    increments_lag_steps: tuple

    @property
    def initial_block(self) -> dict:
        return dict(self.initial)

    def scheme_config(self, N: int) -> SchemeConfig:
        return SchemeConfig(self.nu, self.kappa, self.T, N, self.grid,
                            self.picard_tol, self.picard_max_iter)

    def to_dict(self) -> dict:
        d = {
            "grid": {"K": self.grid.K, "L": self.grid.L,
                     "dealias_cutoff": self.grid.dealias_cutoff},
            "scheme": {"nu": self.nu, "kappa": self.kappa, "T": self.T,
                       "picard_tol": self.picard_tol,
                       "picard_max_iter": self.picard_max_iter},
            "initial": dict(self.initial),
            "mesh": {"N_list": list(self.N_list), "N_ref": self.N_ref},
            "paths": self.paths,
            "base_seed": self.base_seed,
            "localization": {"M": self.M},
            "eta": self.eta,
            "increments": {"N_fine": self.increments_N_fine,
                           "lag_steps": list(self.increments_lag_steps)},
        }
        for name, cov, diff in (("u", self.cov_u, self.diff_u),
                                ("theta", self.cov_theta, self.diff_theta)):
            c = {"law": cov.law, "J": cov.J}
            if cov.law == "power_law":
                c["alpha"] = cov.alpha
            elif cov.law == "exponential":
                c["gamma"] = cov.gamma_
            else:
                c["values"] = list(cov.values)
            d[f"covariance_{name}"] = c
            d[f"diffusion_{name}"] = {
                "family": diff.family,
                "gain": diff.gain,
                "cap": diff.cap,
                "constants": {k: diff.constants[k]
                              for k in ("K0", "K1", "K2", "K3", "L1")},
            }
        return d


def _reject_unknown(section: str, block: dict, allowed: set):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {section!r}")


def _merged(section: str, supplied: dict | None, allowed: set | None = None) -> dict:
    base = dict(_DEFAULTS[section])
    if supplied is None:
        return base
    if not isinstance(supplied, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    _reject_unknown(section, supplied, allowed if allowed is not None else set(base))
    base.update(supplied)
    return base


def _parse_covariance(section: str, block: dict | None, kind: str) -> CovarianceSpec:
    merged = _merged(section, block, _COV_KEYS)
    law = merged["law"]
    # only the parameter belonging to the chosen law is carried along so that
    # parse(serialize(parse(doc))) yields an equal config
    alpha = merged.get("alpha") if law == "power_law" else None
    gamma = merged.get("gamma") if law == "exponential" else None
    values = merged.get("values") if law == "finite_list" else None
    try:
        return CovarianceSpec(
            kind=kind,
            law=law,
            J=int(merged["J"]),
            alpha=float(alpha) if alpha is not None else None,
            gamma_=float(gamma) if gamma is not None else None,
            values=tuple(float(v) for v in values) if values is not None else None,
        )
    except ValueError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def _parse_diffusion(section: str, block: dict | None, cov: CovarianceSpec,
                     grid: TorusGrid) -> DiffusionSpec:
    merged = _merged(section, block, _DIFF_KEYS)
    family = merged["family"]
    gain = float(merged["gain"])
    cap = float(merged.get("cap", 1.0))
    constants = merged.get("constants")
    try:
        if constants is None:
            return diffusion_preset(family, cov, grid, gain, cap)
        if not isinstance(constants, dict):
            raise ConfigError(f"section {section!r}: constants must be a mapping")
        _reject_unknown(f"{section}.constants", constants, {"K0", "K1", "K2", "K3", "L1"})
        missing = {"K0", "K1", "K2", "K3", "L1"} - set(constants)
        if missing:
            raise ConfigError(
                f"section {section!r}: missing constant {sorted(missing)[0]!r}"
            )
        return DiffusionSpec(family, cov, gain, cap,
                             {k: float(v) for k, v in constants.items()})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment document, filling defaults."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    _reject_unknown("<top level>", doc, set(_DEFAULTS))

    gblock = _merged("grid", doc.get("grid"))
    try:
        cutoff = gblock.get("dealias_cutoff")
        grid = TorusGrid(int(gblock["K"]), float(gblock["L"]),
                         None if cutoff is None else int(cutoff))
    except ValueError as exc:
        raise ConfigError(f"section 'grid': {exc}") from exc

    sblock = _merged("scheme", doc.get("scheme"))
    mblock = _merged("mesh", doc.get("mesh"))
    N_list = tuple(int(n) for n in mblock["N_list"])
    N_ref = int(mblock["N_ref"])
    if not N_list:
        raise ConfigError("section 'mesh': N_list must be nonempty")
    for n in N_list:
        if n < 1 or N_ref % n != 0:
            raise ConfigError(
                f"section 'mesh': N={n} does not divide N_ref={N_ref}"
            )

    cov_u = _parse_covariance("covariance_u", doc.get("covariance_u"), "velocity")
    cov_t = _parse_covariance("covariance_theta", doc.get("covariance_theta"), "scalar")
    try:
        diff_u = _parse_diffusion("diffusion_u", doc.get("diffusion_u"), cov_u, grid)
        diff_t = _parse_diffusion("diffusion_theta", doc.get("diffusion_theta"),
                                  cov_t, grid)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    iblock = _merged("initial", doc.get("initial"), _INITIAL_KEYS)
    iblock = {k: v for k, v in iblock.items() if v is not None}

    paths = int(doc.get("paths", _DEFAULTS["paths"]))
    if paths < 1:
        raise ConfigError("paths must be >= 1")
    lblock = _merged("localization", doc.get("localization"))
    eta = float(doc.get("eta", _DEFAULTS["eta"]))
    if not 0 < eta < 1:
        raise ConfigError("eta must lie in (0, 1)")
    incblock = _merged("increments", doc.get("increments"))
    lag_steps = tuple(int(l) for l in incblock["lag_steps"])
    n_fine = int(incblock["N_fine"])
    T = float(sblock["T"])
    for lag in lag_steps:
        if lag < 1 or lag * T / n_fine > T / 4 + 1e-12:
            raise ConfigError(
                f"section 'increments': lag {lag} outside [h_min, T/4]"
            )

    return ExperimentConfig(
        grid=grid,
        nu=float(sblock["nu"]),
        kappa=float(sblock["kappa"]),
        T=T,
        picard_tol=float(sblock["picard_tol"]),
        picard_max_iter=int(sblock["picard_max_iter"]),
        cov_u=cov_u,
        cov_theta=cov_t,
        diff_u=diff_u,
        diff_theta=diff_t,
        initial=tuple(sorted(iblock.items())),
        N_list=N_list,
        N_ref=N_ref,
        paths=paths,
        base_seed=int(doc.get("base_seed", _DEFAULTS["base_seed"])),
        M=float(lblock["M"]),
        eta=eta,
        increments_N_fine=n_fine,
        increments_lag_steps=lag_steps,
    )


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# campaign plumbing


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path, header: list[str], rows: list[tuple]):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _atomic_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
    os.replace(tmp, path)


def _partial_dir(out_dir: str, campaign: str) -> str:
    d = os.path.join(out_dir, "partials", campaign)
    os.makedirs(d, exist_ok=True)
    return d


_GNUPLOT_SNIPPETS = {
    "rates.csv": (
        "set logscale xy\n"
        'set xlabel "N"\n'
        'set ylabel "mean localized squared error"\n'
        'plot "rates.csv" using 1:2:3:4 with yerrorbars title "mean sq err"\n'
    ),
    "proba.csv": (
        "set logscale x\n"
        'set xlabel "N"\n'
        'set ylabel "P[error >= N^{-eta}]"\n'
        'set yrange [0:1]\n'
        'plot "proba.csv" using 1:3:4 with yerrorbars title "p hat"\n'
    ),
    "moments.csv": (
        'set xlabel "N"\n'
        'set ylabel "moment estimate"\n'
        'plot "moments.csv" using 1:4 title "estimates"\n'
    ),
    "increments.csv": (
        "set logscale xy\n"
        'set xlabel "lag"\n'
        'set ylabel "mean squared increment"\n'
        'plot "increments.csv" using 1:2 with linespoints title "velocity", '
        '"increments.csv" using 1:3 with linespoints title "temperature"\n'
    ),
}


def _write_gnuplot(out_dir: str, csv_names: list[str]):
    lines = ["# gnuplot script for the campaign CSVs in this directory",
             'set datafile separator ","', "set key left top"]
    for i, name in enumerate(csv_names):
        if i:
            lines.append("pause -1\nreset\nset datafile separator \",\"")
        lines.append(_GNUPLOT_SNIPPETS[name])
    with open(os.path.join(out_dir, "plots.gp"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _config_digest(cfg: ExperimentConfig) -> str:
    import hashlib

    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]


def _partial_is_current(fname: str, digest: str) -> bool:
    if not os.path.exists(fname):
        return False
    try:
        with open(fname) as fh:
            return json.load(fh).get("cfg_digest") == digest
    except (OSError, json.JSONDecodeError):
        return False


def _run_pool(task, cfg: ExperimentConfig, out_dir: str, campaign: str,
              workers: int, resume: bool):
    pdir = _partial_dir(out_dir, campaign)
    digest = _config_digest(cfg)
    pending = []
    for p in range(cfg.paths):
        fname = os.path.join(pdir, f"path_{p:05d}.json")
        # a stale partial (different config) is recomputed even under resume
        if resume and _partial_is_current(fname, digest):
            continue
        pending.append((cfg.to_dict(), p, fname))
    if pending:
        if workers > 1:
            with multiprocessing.Pool(processes=workers) as pool:
                pool.starmap(task, pending, chunksize=1)
        else:
            for args in pending:
                task(*args)
    results = []
    for p in range(cfg.paths):
        with open(os.path.join(pdir, f"path_{p:05d}.json")) as fh:
            results.append(json.load(fh))
    return results


def _sample_pair(cfg: ExperimentConfig, p: int, N_max: int):
    seed = cfg.base_seed + p
    path_u = sample_path(cfg.cov_u, N_max, cfg.T, seed, stream=0)
    path_t = sample_path(cfg.cov_theta, N_max, cfg.T, seed, stream=1)
    return seed, path_u, path_t


# --- converge ---------------------------------------------------------------


def _converge_path(cfg_dict: dict, p: int, out_file: str):
    cfg = parse_config(yaml.safe_dump(cfg_dict))
    seed, path_u, path_t = _sample_pair(cfg, p, cfg.N_ref)
    u0, th0 = build_initial_data(cfg.grid, cfg.initial_block)
    loc = LocalizationConfig(cfg.M)
    result = {"seed": seed, "cfg_digest": _config_digest(cfg),
              "reports": [], "failures": []}
    needed = sorted({j * (cfg.N_ref // N) for N in cfg.N_list for j in range(N + 1)})
    try:
        _, ref_stats, ref_states = run_trajectory(
            u0, th0, path_u, path_t, cfg.N_ref, cfg.scheme_config(cfg.N_ref),
            cfg.diff_u, cfg.diff_theta, store=needed, audit_energy=False)
    except PicardDiverged as err:
        result["failures"].append({"N": cfg.N_ref, "step": err.step_index,
                                   "stage": err.stage})
        _atomic_json(out_file, result)
        return
    reference = StoredTrajectory(cfg.N_ref, cfg.T, seed, ref_states, ref_stats)
    result["reference"] = {"sup_V1_u": ref_stats.sup_V1_u,
                           "sup_H1_theta": ref_stats.sup_H1_theta}
    for N in cfg.N_list:
        try:
            _, stats, states = run_trajectory(
                u0, th0, path_u, path_t, N, cfg.scheme_config(N),
                cfg.diff_u, cfg.diff_theta, store="all", audit_energy=False)
        except PicardDiverged as err:
            result["failures"].append({"N": N, "step": err.step_index,
                                       "stage": err.stage})
            continue
        coarse = StoredTrajectory(N, cfg.T, seed, states, stats)
        rep = compute_errors(coarse, reference, loc)
        result["reports"].append({
            "N": rep.N,
            "times": rep.times.tolist(),
            "err_u_sq": rep.err_u_sq.tolist(),
            "err_theta_sq": rep.err_theta_sq.tolist(),
            "max_sq_error": rep.max_sq_error,
            "gradient_error_sum": rep.gradient_error_sum,
            "localized": bool(rep.localized),
            "M_used": rep.M_used,
        })
    _atomic_json(out_file, result)


def _report_from_dict(d: dict, seed: int) -> ErrorReport:
    return ErrorReport(
        N=d["N"], seed=seed, times=np.array(d["times"]),
        err_u_sq=np.array(d["err_u_sq"]), err_theta_sq=np.array(d["err_theta_sq"]),
        max_sq_error=d["max_sq_error"],
        gradient_error_sum=d["gradient_error_sum"],
        localized=d["localized"], M_used=d["M_used"],
    )


@dataclass
class ConvergeResult:
    exit_code: int
    reports_by_N: dict
    rate_fit: object
    proba_rows: list
    failures: list
    constants: RateConstants
    localized_fraction: dict


def run_converge(cfg: ExperimentConfig, out_dir: str, workers: int = 1,
                 resume: bool = False) -> ConvergeResult:
    """Coupled-ladder campaign: errors.csv, rates.csv, proba.csv (+ summary)."""
    os.makedirs(out_dir, exist_ok=True)
    results = _run_pool(_converge_path, cfg, out_dir, "converge", workers, resume)
    results.sort(key=lambda r: r["seed"])

    error_rows = []
    reports_by_N: dict[int, list[ErrorReport]] = {N: [] for N in cfg.N_list}
    failures = []
    for res in results:
        seed = res["seed"]
        for f in res["failures"]:
            failures.append((seed, f["N"], f["step"], f["stage"]))
        for d in res["reports"]:
            rep = _report_from_dict(d, seed)
            reports_by_N[rep.N].append(rep)
            for j, t in enumerate(rep.times):
                error_rows.append((seed, rep.N, t, rep.err_u_sq[j],
                                   rep.err_theta_sq[j], rep.gradient_error_sum,
                                   rep.localized))
    error_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    _write_csv(os.path.join(out_dir, "errors.csv"),
               ["seed", "N", "t_j", "err_u_sq", "err_theta_sq",
                "grad_err_sum", "localized"], error_rows)

    rate_rows = []
    localized_fraction = {}
    for N in sorted(reports_by_N):
        reps = reports_by_N[N]
        loc_vals = np.array([r.max_sq_error for r in reps if r.localized])
        localized_fraction[N] = (len(loc_vals) / len(reps)) if reps else 0.0
        if len(loc_vals) == 0:
            rate_rows.append((N, float("nan"), float("nan"), float("nan")))
            continue
        mean = float(loc_vals.mean())
        se = float(loc_vals.std(ddof=1) / np.sqrt(len(loc_vals))) if len(loc_vals) > 1 else 0.0
        rate_rows.append((N, mean, mean - 1.959963984540054 * se,
                          mean + 1.959963984540054 * se))
    _write_csv(os.path.join(out_dir, "rates.csv"),
               ["N", "mean_sq_err", "ci_lo", "ci_hi"], rate_rows)

    proba_rows = estimate_probability_rate(
        {N: reps for N, reps in reports_by_N.items() if reps}, cfg.eta)
    _write_csv(os.path.join(out_dir, "proba.csv"),
               ["N", "eta", "p_hat", "ci"],
               [(r.N, r.eta, r.p_hat, r.ci_halfwidth) for r in proba_rows])

    if failures:
        _write_csv(os.path.join(out_dir, "failures.csv"),
                   ["seed", "N", "step", "stage"],
                   [(s, n, st if st is not None else -1, stage)
                    for s, n, st, stage in failures])

    try:
        rate_fit = estimate_strong_rate(reports_by_N)
    except ValueError:
        rate_fit = None

    c4, _ = gagliardo_nirenberg_constant(cfg.grid, n_samples=1000,
                                         seed=cfg.base_seed)
    constants = RateConstants(eta=cfg.eta, gamma=0.1, c4_bar=c4, nu=cfg.nu,
                              kappa=cfg.kappa, M=cfg.M)
    summary = {
        "config": cfg.to_dict(),
        "c4_bar": c4,
        "localization_constant": constants.localization_constant,
        "error_amplification_expCT": constants.error_amplification(cfg.T),
        "localized_fraction": {str(k): v for k, v in localized_fraction.items()},
        "failed_paths": len({s for s, *_ in failures}),
        "paths": cfg.paths,
        "rate_slope": None if rate_fit is None else rate_fit.slope,
        "rate_r_squared": None if rate_fit is None else rate_fit.r_squared,
    }
    _atomic_json(os.path.join(out_dir, "summary.json"), summary)
    _write_gnuplot(out_dir, ["rates.csv", "proba.csv"])

    failed_paths = len({s for s, *_ in failures})
    exit_code = EXIT_SOLVER if failed_paths > _FAILURE_THRESHOLD * cfg.paths else EXIT_OK
    return ConvergeResult(exit_code, reports_by_N, rate_fit, proba_rows,
                          failures, constants, localized_fraction)


# --- moments -----------------------------------------------------------------


def _moments_path(cfg_dict: dict, p: int, out_file: str):
    cfg = parse_config(yaml.safe_dump(cfg_dict))
    seed, path_u, path_t = _sample_pair(cfg, p, cfg.N_ref)
    u0, th0 = build_initial_data(cfg.grid, cfg.initial_block)
    result = {"seed": seed, "cfg_digest": _config_digest(cfg),
              "stats": {}, "failures": []}
    for N in cfg.N_list:
        try:
            _, stats, _ = run_trajectory(
                u0, th0, path_u, path_t, N, cfg.scheme_config(N),
                cfg.diff_u, cfg.diff_theta, store=None, audit_energy=False)
        except PicardDiverged as err:
            result["failures"].append({"N": N, "step": err.step_index,
                                       "stage": err.stage})
            continue
        d = stats.as_dict()
        for drop in ("energy_res_u", "energy_res_theta", "picard_iters"):
            d.pop(drop)
        result["stats"][str(N)] = d
    _atomic_json(out_file, result)


def run_moments(cfg: ExperimentConfig, out_dir: str, workers: int = 1,
                resume: bool = False):
    """Moment-table campaign: moments.csv."""
    from .scheme import TrajectoryStats

    os.makedirs(out_dir, exist_ok=True)
    results = _run_pool(_moments_path, cfg, out_dir, "moments", workers, resume)
    results.sort(key=lambda r: r["seed"])
    stats_by_N = {N: [] for N in cfg.N_list}
    failures = []
    for res in results:
        for f in res["failures"]:
            failures.append((res["seed"], f["N"], f["step"], f["stage"]))
        for N_str, d in res["stats"].items():
            stats_by_N[int(N_str)].append(TrajectoryStats.from_dict(d))
    rows = moment_table({N: v for N, v in stats_by_N.items() if v})
    _write_csv(os.path.join(out_dir, "moments.csv"),
               ["N", "order", "functional", "estimate", "stderr"],
               [(r.N, r.order, r.functional, r.estimate, r.stderr) for r in rows])
    _write_gnuplot(out_dir, ["moments.csv"])
    if failures:
        _write_csv(os.path.join(out_dir, "failures.csv"),
                   ["seed", "N", "step", "stage"],
                   [(s, n, st if st is not None else -1, stage)
                    for s, n, st, stage in failures])
    failed_paths = len({s for s, *_ in failures})
    exit_code = EXIT_SOLVER if failed_paths > _FAILURE_THRESHOLD * cfg.paths else EXIT_OK
    return exit_code, rows, failures


# --- increments ---------------------------------------------------------------


def _increments_path(cfg_dict: dict, p: int, out_file: str):
    cfg = parse_config(yaml.safe_dump(cfg_dict))
    N_fine = cfg.increments_N_fine
    seed, path_u, path_t = _sample_pair(cfg, p, N_fine)
    u0, th0 = build_initial_data(cfg.grid, cfg.initial_block)
    result = {"seed": seed, "cfg_digest": _config_digest(cfg), "failures": []}
    try:
        _, _, states = run_trajectory(
            u0, th0, path_u, path_t, N_fine, cfg.scheme_config(N_fine),
            cfg.diff_u, cfg.diff_theta, store="all", audit_energy=False)
    except PicardDiverged as err:
        result["failures"].append({"N": N_fine, "step": err.step_index,
                                   "stage": err.stage})
        _atomic_json(out_file, result)
        return
    ordered = [states[i] for i in range(N_fine + 1)]
    deltas, msq_u, msq_t = mean_squared_increments(
        [s.u for s in ordered], [s.theta for s in ordered],
        list(cfg.increments_lag_steps), cfg.T / N_fine)
    result["deltas"] = deltas.tolist()
    result["msq_u"] = msq_u.tolist()
    result["msq_theta"] = msq_t.tolist()
    _atomic_json(out_file, result)


def run_increments(cfg: ExperimentConfig, out_dir: str, workers: int = 1,
                   resume: bool = False):
    """Increment-regularity campaign: increments.csv."""
    os.makedirs(out_dir, exist_ok=True)
    results = _run_pool(_increments_path, cfg, out_dir, "increments", workers, resume)
    results.sort(key=lambda r: r["seed"])
    failures = [(r["seed"], f["N"], f["step"], f["stage"])
                for r in results for f in r["failures"]]
    ok = [r for r in results if not r["failures"]]
    if not ok:
        raise RuntimeError("every path diverged; no increment data")
    deltas = np.array(ok[0]["deltas"])
    tables_u = [np.array(r["msq_u"]) for r in ok]
    tables_t = [np.array(r["msq_theta"]) for r in ok]
    mean_u = np.mean(np.stack(tables_u), axis=0)
    mean_t = np.mean(np.stack(tables_t), axis=0)
    _write_csv(os.path.join(out_dir, "increments.csv"),
               ["delta", "mean_sq_increment_u", "mean_sq_increment_theta"],
               list(zip(deltas, mean_u, mean_t)))
    _write_gnuplot(out_dir, ["increments.csv"])
    fit_u, fit_t = estimate_increment_exponent(deltas, tables_u, tables_t)
    if failures:
        _write_csv(os.path.join(out_dir, "failures.csv"),
                   ["seed", "N", "step", "stage"],
                   [(s, n, st if st is not None else -1, stage)
                    for s, n, st, stage in failures])
    failed_paths = len({s for s, *_ in failures})
    exit_code = EXIT_SOLVER if failed_paths > _FAILURE_THRESHOLD * cfg.paths else EXIT_OK
    return exit_code, (fit_u, fit_t), (deltas, mean_u, mean_t)


# --- simulate ------------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig, out_dir: str, resume: bool = False,
                 checkpoint_every: int | None = None):
    """Single trajectory at the reference mesh with resumable checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    N = cfg.N_ref
    every = checkpoint_every or max(1, N // 16)
    seed, path_u, path_t = _sample_pair(cfg, 0, N)
    save_wiener_path(path_u, os.path.join(out_dir, "path_u.bsnq"))
    save_wiener_path(path_t, os.path.join(out_dir, "path_theta.bsnq"))
    u0, th0 = build_initial_data(cfg.grid, cfg.initial_block)

    resume_from = None
    if resume:
        existing = sorted(f for f in os.listdir(ckpt_dir) if f.endswith(".bsnq"))
        if existing:
            meta, state, stats = load_trajectory_checkpoint(
                os.path.join(ckpt_dir, existing[-1]), cfg.grid)
            if meta["config"] != cfg.to_dict():
                raise ConfigError(
                    "checkpoint was written by a different configuration; "
                    "refusing to resume")
            resume_from = (state, stats)

    def on_step(state, stats):
        if state.index % every == 0 or state.index == N:
            save_trajectory_checkpoint(
                os.path.join(ckpt_dir, f"traj_{state.index:06d}.bsnq"),
                cfg.grid, state, stats, cfg.to_dict(), seed, N, cfg.T)

    final, stats, _ = run_trajectory(
        u0, th0, path_u, path_t, N, cfg.scheme_config(N), cfg.diff_u,
        cfg.diff_theta, store=None, audit_energy=True, on_step=on_step,
        resume_from=resume_from)
    save_field(final.u, os.path.join(out_dir, "final_u.bsnq"))
    save_field(final.theta, os.path.join(out_dir, "final_theta.bsnq"))
    _atomic_json(os.path.join(out_dir, "trajectory_stats.json"),
                 {"seed": seed, "N": N, "stats": stats.as_dict()})
    return EXIT_OK, final, stats


# --- selftest -------------------------------------------------------------------


@dataclass
class SelfTestEntry:
    name: str
    value: float
    threshold: float | None
    passed: bool


@dataclass
class SelfTestReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)


def run_selftest(K: int = 32, seed: int = 0, n_fields: int = 100,
                 n_cert: int = 2000, verbose: bool = True) -> SelfTestReport:
    """Identity suite: projection, antisymmetry, operator round trips, noise
    certification, and the per-step energy identities on a short trajectory."""
    from .nonlinear import (advect_scalar, advect_vector, bilinear_estimate_ratio,
                            pairing_scalar, trilinear_b)
    from .spectral import (apply_fractional_power, divergence_defect,
                           inner_product, leray_project, random_scalar_field,
                           random_vector_field, resolvent, sobolev_norm)

    grid = TorusGrid(K)
    rng = np.random.default_rng(seed)
    entries: list[SelfTestEntry] = []

    def record(name, value, threshold):
        entries.append(SelfTestEntry(name, float(value), threshold,
                                     bool(value <= threshold)))

    def info(name, value):
        entries.append(SelfTestEntry(name, float(value), None, True))

    div_worst = adj_worst = 0.0
    b_anti = b_swap = b_stokes = scalar_anti = 0.0
    for _ in range(n_fields):
        u = random_vector_field(grid, rng)
        v = random_vector_field(grid, rng)
        th = random_scalar_field(grid, rng)
        raw = random_vector_field(grid, rng, divergence_free=False)
        pu = leray_project(raw)
        div_worst = max(div_worst, divergence_defect(pu))
        adj = abs(inner_product(leray_project(raw), v)
                  - inner_product(raw, leray_project(v)))
        scale_adj = sobolev_norm(raw, 0.0) * sobolev_norm(v, 0.0) + 1e-300
        adj_worst = max(adj_worst, adj / scale_adj)
        nu1, nv1 = sobolev_norm(u, 1.0), sobolev_norm(v, 1.0)
        b_anti = max(b_anti, abs(trilinear_b(u, v, v)) / (nu1 * nv1**2 + 1e-300))
        w = random_vector_field(grid, rng)
        b_swap = max(b_swap, abs(trilinear_b(u, v, w) + trilinear_b(u, w, v))
                     / (nu1 * nv1 * sobolev_norm(w, 1.0) + 1e-300))
        au = apply_fractional_power(u, 1.0)
        b_stokes = max(b_stokes, abs(inner_product(advect_vector(u, u), au))
                       / (sobolev_norm(u, 2.0) ** 3 + 1e-300))
        scalar_anti = max(scalar_anti, abs(pairing_scalar(u, th, th))
                          / (nu1 * sobolev_norm(th, 1.0) ** 2 + 1e-300))
    record("leray_divergence", div_worst, 1e-12)
    record("leray_self_adjoint", adj_worst, 1e-10)
    record("trilinear_antisymmetry", b_anti, 1e-10)
    record("trilinear_swap", b_swap, 1e-10)
    record("stokes_pairing", b_stokes, 1e-10)
    record("scalar_antisymmetry", scalar_anti, 1e-10)

    frac_worst = res_worst = 0.0
    for _ in range(20):
        f = random_scalar_field(grid, rng)
        g1 = apply_fractional_power(apply_fractional_power(f, 0.7), -0.7)
        frac_worst = max(frac_worst,
                         float(np.max(np.abs(g1.coeffs - f.coeffs)))
                         / (float(np.max(np.abs(f.coeffs))) + 1e-300))
        r = resolvent(f, 0.37)
        back = r.coeffs * (1.0 + 0.37 * grid.k_sq)
        res_worst = max(res_worst,
                        float(np.max(np.abs(back - f.coeffs)))
                        / (float(np.max(np.abs(f.coeffs))) + 1e-300))
    record("fractional_power_roundtrip", frac_worst, 1e-10)
    record("resolvent_roundtrip", res_worst, 1e-10)

    c4, _ = gagliardo_nirenberg_constant(grid, n_samples=200, seed=seed)
    info("gagliardo_nirenberg_C4", c4)
    ratio_worst = 0.0
    for _ in range(200):
        u = random_vector_field(grid, rng)
        th = random_scalar_field(grid, rng)
        ratio_worst = max(ratio_worst, bilinear_estimate_ratio(u, th))
    info("bilinear_estimate_ratio", ratio_worst)

    cov_u = CovarianceSpec("velocity", "power_law", 16, alpha=2.0)
    cov_t = CovarianceSpec("scalar", "power_law", 16, alpha=2.0)
    for family in ("additive", "diagonal_multiplicative", "linear_mode_scaled"):
        for cov in (cov_u, cov_t):
            spec = diffusion_preset(family, cov, grid, gain=0.5)
            rep = verify_growth_lipschitz(spec, grid, n_samples=n_cert, seed=seed)
            worst = max(rep.growth_v0_ratio, rep.lipschitz_ratio, rep.growth_v1_ratio)
            record(f"certify_{family}_{cov.kind}", worst, 1.0 + 1e-9)

    n_steps = 16
    diff_u = diffusion_preset("diagonal_multiplicative", cov_u, grid, gain=0.5)
    diff_t = diffusion_preset("diagonal_multiplicative", cov_t, grid, gain=0.5)
    from .scheme import taylor_green_velocity, thermal_stripe

    path_u = sample_path(cov_u, n_steps, 0.5, seed, stream=0)
    path_t = sample_path(cov_t, n_steps, 0.5, seed, stream=1)
    cfg = SchemeConfig(nu=1.0, kappa=1.0, T=0.5, N=n_steps, grid=grid)
    _, stats, _ = run_trajectory(taylor_green_velocity(grid), thermal_stripe(grid),
                                 path_u, path_t, n_steps, cfg, diff_u, diff_t)
    record("energy_identity_u", max(stats.energy_res_u), 10 * cfg.picard_tol)
    record("energy_identity_theta", max(stats.energy_res_theta), 10 * cfg.picard_tol)

    if verbose:
        for e in entries:
            status = "PASS" if e.passed else "FAIL"
            if e.threshold is None:
                print(f"[selftest] INFO {e.name}: {e.value:.6g}")
            else:
                print(f"[selftest] {status} {e.name}: {e.value:.3e} "
                      f"(threshold {e.threshold:.1e})")
    return SelfTestReport(entries)
