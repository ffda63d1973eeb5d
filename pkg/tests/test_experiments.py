import json
import math
import os

import numpy as np
import pytest

from bsnq.cli import main as cli_main
from bsnq.experiments import (
    EXIT_CONFIG,
    EXIT_SOLVER,
    ConfigError,
    parse_config,
    run_converge,
    run_increments,
    run_moments,
    run_selftest,
    run_simulate,
    serialize_config,
)

TINY = """
grid: {K: 16}
scheme: {nu: 1.0, kappa: 1.0, T: 0.5}
covariance_u: {law: power_law, alpha: 2.0, J: 8}
covariance_theta: {law: power_law, alpha: 2.0, J: 8}
diffusion_u: {family: linear_mode_scaled, gain: 0.5, cap: 10.0}
diffusion_theta: {family: linear_mode_scaled, gain: 0.5, cap: 10.0}
initial: {kind: taylor_green, amplitude_u: 0.5, amplitude_theta: 0.25}
mesh: {N_list: [4, 8], N_ref: 16}
paths: 2
base_seed: 77
localization: {M: 50.0}
eta: 0.8
increments: {N_fine: 16, lag_steps: [1, 2, 4]}
"""


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_minimal_document_fills_defaults():
    cfg = parse_config("grid: {K: 32}")
    assert cfg.grid.K == 32
    assert cfg.grid.L == pytest.approx(2 * math.pi)
    assert cfg.grid.dealias_cutoff == 10
    assert cfg.picard_tol == 1e-10
    assert cfg.paths == 64
    assert cfg.eta == 0.8


def test_divisibility_error_names_both_values():
    with pytest.raises(ConfigError, match="N=48 does not divide N_ref=64"):
        parse_config("mesh: {N_list: [48], N_ref: 64}")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="viscosity"):
        parse_config("scheme: {viscosity: 1.0}")
    with pytest.raises(ConfigError, match="turbo"):
        parse_config("turbo: true")


def test_missing_constant_rejected():
    doc = """
diffusion_u:
  family: additive
  gain: 1.0
  constants: {K0: 1.0, K1: 0.0, K2: 1.0, K3: 0.0}
"""
    with pytest.raises(ConfigError, match="missing constant 'L1'"):
        parse_config(doc)


def test_invalid_scalars_rejected():
    with pytest.raises(ConfigError, match="paths"):
        parse_config("paths: 0")
    with pytest.raises(ConfigError, match="eta"):
        parse_config("eta: 1.2")
    with pytest.raises(ConfigError, match="lag"):
        parse_config("increments: {N_fine: 16, lag_steps: [8]}")
    with pytest.raises(ConfigError, match="alpha"):
        parse_config("covariance_u: {law: power_law, alpha: 0.5, J: 4}")


def test_serialize_parse_round_trip():
    cfg = parse_config(TINY)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert cfg == again


def test_converge_self_coupling_zero_errors(tmp_path):
    doc = TINY.replace("N_list: [4, 8], N_ref: 16", "N_list: [16], N_ref: 16")
    cfg = parse_config(doc)
    res = run_converge(cfg, str(tmp_path), workers=1)
    assert res.exit_code == 0
    for reps in res.reports_by_N.values():
        for rep in reps:
            assert rep.max_sq_error == 0.0
            assert rep.gradient_error_sum == 0.0
    lines = read(tmp_path / "errors.csv").decode().strip().split("\n")
    assert lines[0] == "seed,N,t_j,err_u_sq,err_theta_sq,grad_err_sum,localized"
    for line in lines[1:]:
        _, _, _, eu, et, gs, _ = line.split(",")
        assert float(eu) == 0.0 and float(et) == 0.0 and float(gs) == 0.0


def test_converge_outputs_and_determinism(tmp_path):
    cfg = parse_config(TINY)
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    out3 = tmp_path / "c"
    run_converge(cfg, str(out1), workers=1)
    run_converge(cfg, str(out2), workers=1)
    run_converge(cfg, str(out3), workers=2)
    for name in ("errors.csv", "rates.csv", "proba.csv"):
        assert read(out1 / name) == read(out2 / name), f"{name} not reproducible"
        assert read(out1 / name) == read(out3 / name), f"{name} depends on workers"
    header = read(out1 / "rates.csv").decode().split("\n")[0]
    assert header == "N,mean_sq_err,ci_lo,ci_hi"
    header = read(out1 / "proba.csv").decode().split("\n")[0]
    assert header == "N,eta,p_hat,ci"
    summary = json.loads(read(out1 / "summary.json"))
    assert "c4_bar" in summary and "error_amplification_expCT" in summary


def test_converge_resume_reuses_partials(tmp_path):
    cfg = parse_config(TINY)
    out = tmp_path / "r"
    run_converge(cfg, str(out), workers=1)
    first = read(out / "errors.csv")
    # drop one partial; resume recomputes only that path
    pdir = out / "partials" / "converge"
    victims = sorted(os.listdir(pdir))
    os.remove(pdir / victims[0])
    kept = pdir / victims[1]
    stamp = os.path.getmtime(kept)
    res = run_converge(cfg, str(out), workers=1, resume=True)
    assert res.exit_code == 0
    assert read(out / "errors.csv") == first
    assert os.path.getmtime(kept) == stamp  # untouched partial was reused


def test_moments_campaign(tmp_path):
    cfg = parse_config(TINY)
    code, rows, fails = run_moments(cfg, str(tmp_path), workers=1)
    assert code == 0 and not fails
    header = read(tmp_path / "moments.csv").decode().split("\n")[0]
    assert header == "N,order,functional,estimate,stderr"
    assert {r.order for r in rows} == {2, 4, 8}
    assert {r.N for r in rows} == {4, 8}


def test_increments_campaign(tmp_path):
    cfg = parse_config(TINY)
    code, (fit_u, fit_t), (deltas, mu, mt) = run_increments(cfg, str(tmp_path),
                                                            workers=1)
    assert code == 0
    header = read(tmp_path / "increments.csv").decode().split("\n")[0]
    assert header == "delta,mean_sq_increment_u,mean_sq_increment_theta"
    assert len(deltas) == 3
    assert np.all(np.diff(mu) > 0)  # increments grow with the lag


@pytest.mark.filterwarnings("ignore:invalid value encountered")
@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_diverged_paths_recorded_and_exit_code(tmp_path):
    doc = TINY.replace("T: 0.5", "T: 80.0").replace(
        "amplitude_u: 0.5", "amplitude_u: 50.0")
    cfg = parse_config(doc)
    res = run_converge(cfg, str(tmp_path), workers=1)
    assert res.exit_code == EXIT_SOLVER
    assert res.failures
    lines = read(tmp_path / "failures.csv").decode().strip().split("\n")
    assert lines[0] == "seed,N,step,stage"
    assert len(lines) > 1


def test_simulate_and_resume_bit_identical(tmp_path):
    doc = TINY.replace("N_ref: 16", "N_ref: 8").replace("N_list: [4, 8]",
                                                        "N_list: [4]")
    cfg = parse_config(doc)
    full = tmp_path / "full"
    code, final_full, _ = run_simulate(cfg, str(full), checkpoint_every=2)
    assert code == 0
    # simulate again elsewhere, wipe late checkpoints, resume from step 4
    part = tmp_path / "part"
    run_simulate(cfg, str(part), checkpoint_every=2)
    ckpts = part / "checkpoints"
    for name in sorted(os.listdir(ckpts)):
        step = int(name.split("_")[1].split(".")[0])
        if step > 4:
            os.remove(ckpts / name)
    (part / "final_u.bsnq").unlink()
    code, final_resumed, _ = run_simulate(cfg, str(part), resume=True,
                                          checkpoint_every=2)
    assert code == 0
    assert np.array_equal(final_resumed.u.coeffs, final_full.u.coeffs)
    assert np.array_equal(final_resumed.theta.coeffs, final_full.theta.coeffs)
    assert read(full / "final_u.bsnq") == read(part / "final_u.bsnq")


def test_selftest_quick_grid():
    report = run_selftest(K=16, seed=0, n_fields=20, n_cert=100, verbose=False)
    assert report.passed, [e for e in report.entries if not e.passed]


def test_cli_exit_codes(tmp_path):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text(TINY)
    out = tmp_path / "out"
    assert cli_main(["converge", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "errors.csv").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("mesh: {N_list: [3], N_ref: 4}")
    assert cli_main(["converge", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert cli_main(["moments", "--config", str(tmp_path / "nope.yaml"),
                     "--out", str(out)]) == EXIT_CONFIG
