"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured quantities.

The linear-Gaussian criteria run against the exact filter and the analytic
twist recursion; the grid and inference criteria are desk-scale versions of
the benchmark studies with qualitative bars (ordering and order of
magnitude), since the full-scale runs are out of reach here.
"""

import time
import warnings

import numpy as np

from twistsmc import (
    LgssmParams,
    MsvParams,
    ParamTransform,
    PriorSpec,
    SchemeConfig,
    build_lgssm_fk,
    build_twisted_model,
    controlled_smc_train,
    ess,
    exact_lgssm_policy,
    forward_train,
    kalman,
    online_forward,
    pmmh_run,
    run_smc,
    simulate_lgssm,
    simulate_msv,
    temper_exponent,
    twist_gaussian,
)
from twistsmc.cli import cmd_grid_nlobs
from twistsmc.learn import feature_count
from twistsmc.pmmh import (
    inverse_gamma_block,
    msv_model_builder,
    msv_prior,
    msv_theta_init,
    msv_transform,
    smc_estimator,
    trained_estimator,
    triangular_block,
    uniform01_block,
)
from twistsmc.rng import generator, substream
from twistsmc.twist import LogQuadraticTwist

warnings.filterwarnings("ignore", message="overflow")


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def reference_lgssm(T, seed):
    params = LgssmParams(
        trans_matrix=[[0.8]],
        trans_cov=[[1.0]],
        obs_matrix=[[1.0]],
        obs_cov=[[0.1]],
        initial_mean=[0.0],
        initial_cov=[[1.0 / (1.0 - 0.64)]],
    )
    _, ys = simulate_lgssm(params, T, seed)
    return params, ys, build_lgssm_fk(params, ys)


def policy_max_rel_err(fitted, exact, floor=1e-12):
    errs = []
    for a, b in zip(fitted.twists, exact.twists):
        errs.append(np.max(np.abs(a.A - b.A) / (np.abs(b.A) + floor)))
        errs.append(np.max(np.abs(a.b - b.b) / (np.abs(b.b) + floor)))
        errs.append(abs(a.c - b.c) / (abs(b.c) + floor))
    return float(max(errs))


def test_criterion_01_lgssm_zero_variance_optimum():
    t0 = time.perf_counter()
    params, ys, ref = reference_lgssm(T=25, seed=101)
    policy = exact_lgssm_policy(params, ys)
    oracle = kalman(params, ys)
    eta0_err = abs(policy.log_eta0 - oracle.log_z_total)
    trace = run_smc(build_twisted_model(ref, policy), 512, 7)
    spread = 0.0
    for cloud in trace.clouds:
        w = np.exp(cloud.log_weights - cloud.log_weights.max())
        spread = max(spread, float(1.0 - w.min()))
    elapsed = time.perf_counter() - t0
    report(
        1,
        spread <= 1e-8 and eta0_err <= 1e-8 and elapsed < 10,
        f"weight spread {spread:.2e} (<=1e-8), |log eta0 - kalman| {eta0_err:.2e} "
        f"(<=1e-8), {elapsed:.1f}s (<10s)",
    )


def test_criterion_02_backward_one_iteration_exactness():
    t0 = time.perf_counter()
    params, ys, ref = reference_lgssm(T=25, seed=101)
    exact = exact_lgssm_policy(params, ys)
    cfg = SchemeConfig(n_train=512, l_max=1, mode="full", seed=0)
    fit_err = 0.0
    log_zs = []
    boot = []
    for rep in range(64):
        run = controlled_smc_train(ref, cfg, rng=substream(202, rep))
        fit_err = max(fit_err, policy_max_rel_err(run.policies[1], exact))
        log_zs.append(run.log_zs[1])
        boot.append(run.log_zs[0])
    var_fit = float(np.var(log_zs, ddof=1))
    var_boot = float(np.var(boot, ddof=1))
    elapsed = time.perf_counter() - t0
    report(
        2,
        fit_err <= 1e-4 and var_fit <= 1e-3 and var_boot >= 10 * max(var_fit, 1e-4) and elapsed < 120,
        f"fit err {fit_err:.2e} (<=1e-4), var {var_fit:.2e} (<=1e-3), "
        f"bootstrap var {var_boot:.3f} (>=10x), {elapsed:.1f}s (<2min)",
    )


def test_criterion_03_forward_fixed_lag_exactness():
    t0 = time.perf_counter()
    params, ys, ref = reference_lgssm(T=25, seed=101)
    l_max = 5
    cfg = SchemeConfig(n_train=512, l_max=l_max, mode="full", seed=0)
    fit_err = 0.0
    rows = []
    boot = []
    exacts = [exact_lgssm_policy(params, ys, lag=lag) for lag in range(1, l_max + 1)]
    for rep in range(64):
        run = forward_train(ref, cfg, rng=substream(303, rep), keep_traces=False)
        for lag in range(1, l_max + 1):
            fit_err = max(fit_err, policy_max_rel_err(run.policies[lag], exacts[lag - 1]))
        rows.append(run.log_zs[1:])
        boot.append(run.log_zs[0])
    variances = np.asarray(rows).var(axis=0, ddof=1)
    var_boot = float(np.var(boot, ddof=1))
    monotone = all(
        variances[i] <= 1.5 * variances[i - 1] for i in range(1, l_max)
    )
    final_ok = variances[-1] <= 0.05 * var_boot
    elapsed = time.perf_counter() - t0
    report(
        3,
        fit_err <= 1e-4 and monotone and final_ok and elapsed < 300,
        f"fit err {fit_err:.2e} (<=1e-4), variances {np.array2string(variances, precision=2)} "
        f"non-increasing per 1.5x steps: {monotone}, final/bootstrap "
        f"{variances[-1] / var_boot:.4f} (<=0.05), {elapsed:.0f}s (<5min)",
    )


def test_criterion_04_bootstrap_unbiasedness():
    t0 = time.perf_counter()
    params, ys, ref = reference_lgssm(T=10, seed=404)
    log_z_true = kalman(params, ys).log_z_total
    reps = 1000
    ratios = np.array(
        [
            np.exp(run_smc(ref.fk, 128, substream(405, r)).log_z_total - log_z_true)
            for r in range(reps)
        ]
    )
    se = ratios.std(ddof=1) / np.sqrt(reps)
    dev = abs(ratios.mean() - 1.0)
    elapsed = time.perf_counter() - t0
    report(
        4,
        dev <= 3 * se and elapsed < 60,
        f"|mean(Z hat/Z) - 1| = {dev:.4f} <= 3 x SE = {3 * se:.4f}, {elapsed:.0f}s (<1min)",
    )


def test_criterion_05_twist_integral_against_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    n_mc = 1_000_000
    worst = 0.0
    accepted = 0
    while accepted < 100:
        d = int(rng.integers(1, 5))
        raw = rng.standard_normal((d, d))
        cov = raw @ raw.T + d * np.eye(d)
        prec_min = np.linalg.eigvalsh(np.linalg.inv(cov)).min()
        sym = rng.standard_normal((d, d))
        a = (sym + sym.T) / 2.0
        # keep precision + 2A positive definite so phi^2 is integrable
        a *= 0.45 * prec_min / max(np.abs(np.linalg.eigvalsh(a)).max(), 1e-12)
        twist = LogQuadraticTwist(a, 0.5 * rng.standard_normal(d), float(rng.standard_normal()))
        mean = rng.standard_normal(d)
        _, _, log_eta = twist_gaussian(mean, cov, twist)
        # a million samples only pin the integral down when the integrand's
        # per-draw relative spread is modest; screen out the heavy-tailed
        # triples where the MC side of the comparison carries no information
        double = LogQuadraticTwist(2 * twist.A, 2 * twist.b, 2 * twist.c)
        _, _, log_eta2 = twist_gaussian(mean, cov, double)
        rel_sd = np.sqrt(max(np.exp(log_eta2 - 2 * log_eta) - 1.0, 0.0))
        if rel_sd > 10.0:
            continue
        z = generator(substream(506, accepted)).standard_normal((n_mc, d))
        draws = mean + z @ np.linalg.cholesky(cov).T
        vals = np.exp(twist.log_values(draws))
        mc = vals.mean()
        se = vals.std(ddof=1) / np.sqrt(n_mc)
        worst = max(worst, abs(np.exp(log_eta) - mc) / (3 * se))
        accepted += 1
    elapsed = time.perf_counter() - t0
    report(
        5,
        worst <= 1.0 and elapsed < 60,
        f"max |closed form - MC| / (3 SE) = {worst:.2f} over 100 triples (<=1), "
        f"{elapsed:.0f}s (<1min)",
    )


def test_criterion_06_tempering_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    worst = 0.0
    cases = [np.concatenate([[0.0], np.full(99, -50.0)])]
    cases += [rng.normal(scale=rng.uniform(10, 40), size=int(rng.integers(30, 200))) for _ in range(20)]
    for lw in cases:
        n0 = 2 * feature_count(1, "diagonal")
        if ess(lw) >= n0:
            continue
        out = temper_exponent(lw, float(n0), tolerance=0.5)
        worst = max(worst, abs(out.achieved_ess - n0))
        # grid-search cross-check of the calibrated exponent
        shifted = lw - lw.max()
        grid = np.linspace(1e-6, 1.0, 4001)
        ess_grid = np.array([ess(a * shifted) for a in grid])
        best = grid[np.argmin(np.abs(ess_grid - n0))]
        assert abs(ess(best * shifted) - n0) >= abs(out.achieved_ess - n0) - 0.5
    elapsed = time.perf_counter() - t0
    report(
        6,
        worst <= 0.5 and elapsed < 10,
        f"max |achieved ESS - target| = {worst:.3f} (<=0.5), {elapsed:.2f}s",
    )


def test_criterion_07_cost_accounting():
    params, ys, ref = reference_lgssm(T=13, seed=707)
    n = 64
    fwd = forward_train(ref, SchemeConfig(n_train=n, l_max=3, seed=1), keep_traces=False)
    bwd = controlled_smc_train(ref, SchemeConfig(n_train=n, l_max=3, seed=2))
    fast = online_forward(ref, SchemeConfig(n_train=n, l_max=3, seed=3), fast=True)
    ok = (
        all(k == 2 * n * 13 for k in fwd.kernel_samples[1:])
        and all(k == n * 13 for k in bwd.kernel_samples[1:])
        and all(k == n * 13 for k in fast.kernel_samples[1:])
    )
    report(
        7,
        ok,
        f"per-iteration kernel draws: forward {fwd.kernel_samples[1:]} (=2NT), "
        f"backward {bwd.kernel_samples[1:]} (=NT), fast-online {fast.kernel_samples[1:]} (=NT)",
    )


def test_criterion_08_online_equivalence():
    t0 = time.perf_counter()
    from twistsmc import NlObsParams, build_nlobs_fk, simulate_nlobs

    params = NlObsParams(alpha=0.95, sigma_x2=0.1, sigma_y2=0.02, T=20)
    _, ys = simulate_nlobs(params, 808)
    ref = build_nlobs_fk(params, ys)
    cfg = SchemeConfig(n_train=128, l_max=4, mode="diagonal", seed=809)
    sweep = forward_train(ref, cfg, keep_traces=False)
    stream = online_forward(ref, cfg)
    identical = tuple(sweep.log_zs[1:]) == tuple(stream.log_zs[1:])
    for lag in range(cfg.l_max + 1):
        p, q = sweep.policies[lag], stream.policies[lag]
        for a, b in zip(p.twists, q.twists):
            identical &= (
                np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b) and a.c == b.c
            )
        identical &= p.log_eta0 == q.log_eta0
    elapsed = time.perf_counter() - t0
    report(
        8,
        bool(identical) and elapsed < 60,
        f"streaming vs sweep order: policies and per-iteration log-normalizers "
        f"bit-identical = {bool(identical)}, {elapsed:.1f}s (<1min)",
    )


def test_criterion_09_robustness_ordering(tmp_path):
    t0 = time.perf_counter()
    config = {
        "grid": {
            "alphas": [0.95, 0.99],
            "sigma_x2": [0.05, 0.10, 0.15],
            "sigma_y2": [0.01, 0.055],
            "datasets_per_cell": 5,
            "T": 100,
            "n": 256,
            "runs": 16,
            "l_max": 4,
            "schemes": ["forward", "backward"],
            "mode": "diagonal",
            "tempering": True,
            "workers": 2,
        },
        "replication": {"runs": 16, "seed": 314159},
    }
    summary = cmd_grid_nlobs(config, tmp_path)
    fwd = summary["proportions"]["forward"]["4"]["gt_tenfold"]
    bwd = summary["proportions"]["backward"]["4"]["gt_tenfold"]
    elapsed = time.perf_counter() - t0
    report(
        9,
        fwd < bwd and fwd <= 0.10 and elapsed < 1800,
        f"fraction of datasets with sd > 10x bootstrap at final iteration: "
        f"forward {fwd:.3f} (<= 0.10) vs backward {bwd:.3f} (strictly larger), "
        f"{elapsed:.0f}s (<30min)",
    )


def test_criterion_10_msv_property_suite():
    t0 = time.perf_counter()
    # --- desk-scale stochastic-volatility chains ---
    params = MsvParams(
        m=np.full(3, -1.0), alpha=np.full(3, 0.9), sigma2=np.full(3, 0.2), rho=np.full(2, 0.25)
    )
    _, ys = simulate_msv(params, 60, 1001)
    builder = msv_model_builder(ys)
    prior = msv_prior(3)
    transform = msv_transform(3)
    theta0 = msv_theta_init(ys)
    estimators = {
        "bootstrap": smc_estimator(builder, 300),
        "forward": trained_estimator(
            builder, "forward", SchemeConfig(n_train=50, l_max=2, n_sample=100)
        ),
        "backward": trained_estimator(
            builder, "backward", SchemeConfig(n_train=50, l_max=2, n_sample=100)
        ),
    }
    window_counts = {}
    for idx, (name, estimator) in enumerate(estimators.items()):
        chain = pmmh_run(
            estimator,
            prior,
            transform,
            theta0,
            steps=2000,
            proposal_cov=np.eye(transform.dim) * 0.01,
            seed=substream(1002, idx),
            estimator_name=name,
            variance_every=100,
            variance_reps=10,
        )
        assert len(chain.states) == 2000
        window_counts[name] = len(chain.variance_windows)
    windows_ok = all(count >= 20 for count in window_counts.values())

    # --- prior-only chain matches direct prior sampling (1% KS level) ---
    flat_prior = PriorSpec(
        blocks=(uniform01_block("u", 1), inverse_gamma_block("s", 1), triangular_block("r", 1))
    )
    flat_transform = ParamTransform.from_blocks(
        [("logit", 1), ("log", 1), ("logit_sym", 1)]
    )
    chain = pmmh_run(
        lambda theta, ss: 0.0,
        flat_prior,
        flat_transform,
        np.array([0.5, 0.2, 0.0]),
        steps=210_000,
        proposal_cov=np.eye(3),
        seed=1003,
    )
    draws = chain.thetas()[10_000::10]
    assert draws.shape[0] == 20_000
    rng = generator(1004)
    from scipy.stats import invgamma

    from twistsmc.pmmh import inverse_gamma_hyperparameters

    shape, scale = inverse_gamma_hyperparameters(0.2, 1.0)
    direct = np.column_stack(
        [
            rng.random(20_000),
            invgamma.rvs(shape, scale=scale, size=20_000, random_state=np.random.default_rng(1005)),
            np.where(
                (v := rng.random(20_000)) < 0.5,
                np.sqrt(2 * v) - 1.0,
                1.0 - np.sqrt(2 * (1 - v)),
            ),
        ]
    )
    crit = 1.628 * np.sqrt(2.0 / 20_000.0)
    ks_worst = 0.0
    for j in range(3):
        a, b = np.sort(draws[:, j]), np.sort(direct[:, j])
        grid = np.concatenate([a, b])
        fa = np.searchsorted(a, grid, side="right") / a.size
        fb = np.searchsorted(b, grid, side="right") / b.size
        ks_worst = max(ks_worst, float(np.max(np.abs(fa - fb))))
    ks_ok = ks_worst < crit

    # --- transform Jacobians against central finite differences ---
    rng = np.random.default_rng(1006)
    jac_worst = 0.0
    h = 1e-5
    for _ in range(100):
        theta = np.concatenate(
            [
                rng.normal(size=3),
                rng.uniform(0.05, 0.95, 3),
                rng.uniform(0.05, 2.0, 3),
                rng.uniform(-0.9, 0.9, 2),
            ]
        )
        z = transform.forward(theta)
        total = 0.0
        for i in range(transform.dim):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            total += np.log(abs((transform.inverse(zp)[i] - transform.inverse(zm)[i]) / (2 * h)))
        jac_worst = max(
            jac_worst,
            abs(transform.log_jacobian(z) - total) / max(abs(total), 1e-10),
        )
    jac_ok = jac_worst <= 1e-6
    elapsed = time.perf_counter() - t0
    report(
        10,
        windows_ok and ks_ok and jac_ok and elapsed < 1800,
        f"variance windows per estimator {window_counts} (each >=20), prior KS "
        f"{ks_worst:.4f} < {crit:.4f}, max Jacobian rel err {jac_worst:.2e} (<=1e-6), "
        f"{elapsed:.0f}s (<30min)",
    )
