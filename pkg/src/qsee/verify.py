"""Quantitative property checks shared by the acceptance suite and ``property_suite``.

Every check returns a :class:`CheckResult`; ``quick=True`` shrinks sample
sizes for smoke runs, the default sizes are the acceptance sizes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .harness import ExperimentConfig, build_model, derive_budget, ito_study, ou_study, picard_instance
from .localizer import Caps, run_localized, run_truncated_hierarchy, truncate_Rn
from .models import (
    ModelSpec,
    bounded_diffusivity,
    d2phi_n,
    dphi_n,
    estimate_C_Q,
    make_gdiv_model,
    moment_verify_many,
    phi_n,
)
from .noise import NoiseSpec, coarsen, sample_path
from .spaces import SpaceTriple, theta_lambda
from .stepper import SmallnessBudget, direct_path, picard_solve

__all__ = [
    "CheckResult",
    "CHECKS",
    "check_theta",
    "check_truncation",
    "check_q_bounds",
    "check_phi",
    "check_ou",
    "check_picard",
    "check_localization",
    "check_global_existence",
    "check_moment_shape",
    "check_ito",
    "check_hierarchy",
]

EPS = np.finfo(float).eps


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.elapsed:.1f}s) {self.details.get('headline', '')}".rstrip()


def _timed(name: str):
    def wrap(fn: Callable[..., tuple[bool, dict]]):
        def inner(quick: bool = False, seed: int = 0, **kw) -> CheckResult:
            t0 = time.perf_counter()
            passed, details = fn(quick=quick, seed=seed, **kw)
            return CheckResult(name, bool(passed), details, time.perf_counter() - t0)

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


def _batch_fields(triple: SpaceTriple, rng: np.random.Generator, n: int, amp: np.ndarray, n_modes: int = 12) -> np.ndarray:
    _, E = triple.modes(n_modes)
    decay = rng.uniform(1.0, 3.0, size=(n, 1))
    c = rng.standard_normal((n, n_modes)) * np.arange(1, n_modes + 1, dtype=float) ** (-decay)
    return amp[:, None] * (c @ E.reshape(n_modes, -1))


# cut-off and retraction ---------------------------------------------------------------------


@_timed("theta_cutoff")
def check_theta(quick: bool = False, seed: int = 0, n_pairs: int | None = None):
    """Piecewise values of ``theta_lambda`` and its ``1/lambda`` Lipschitz bound."""
    n_pairs = n_pairs or (10**4 if quick else 10**5)
    rng = np.random.default_rng([seed, 1])
    lams = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), size=10))
    wrong_values = 0
    violations = 0
    for lam in lams:
        x = lam * np.concatenate([rng.uniform(0, 3, 1000), [0.0, lam / lam, 2.0, 3.0], np.linspace(0, 3, 301)])
        th = theta_lambda(x, lam)
        expect = np.where(x <= lam, 1.0, np.where(x <= 2 * lam, 2.0 - x / lam, 0.0))
        wrong_values += int(np.sum(th != expect))
        wrong_values += sum(theta_lambda(float(v), lam) != e for v, e in zip(x[:50], expect[:50]))
        m = n_pairs // lams.size
        a = lam * rng.uniform(0, 3, m)
        # a share of close pairs stresses the affine branch
        b = np.where(rng.random(m) < 0.5, lam * rng.uniform(0, 3, m), a + lam * 1e-6 * rng.standard_normal(m))
        b = np.abs(b)
        lhs = np.abs(theta_lambda(a, lam) - theta_lambda(b, lam))
        rhs = np.abs(a - b) / lam
        violations += int(np.sum(lhs > rhs + 4 * EPS))
    details = {"pairs": int(n_pairs), "wrong_values": int(wrong_values), "lipschitz_violations": violations}
    details["headline"] = f"wrong={wrong_values} violations={violations}/{n_pairs}"
    return wrong_values == 0 and violations == 0, details


@_timed("truncation_Rn")
def check_truncation(quick: bool = False, seed: int = 0, n_pairs: int | None = None):
    """``R_n`` branches and the 2-Lipschitz bound in the ``E_p`` surrogate norm."""
    n_pairs = n_pairs or (2000 if quick else 10**4)
    triple = SpaceTriple()
    rng = np.random.default_rng([seed, 2])
    n = 1.0
    amp = np.exp(rng.uniform(np.log(0.05), np.log(5.0), n_pairs))
    X = _batch_fields(triple, rng, n_pairs, amp)
    near = rng.random(n_pairs) < 0.5
    Y = np.where(
        near[:, None],
        X + _batch_fields(triple, rng, n_pairs, amp * np.exp(rng.uniform(np.log(1e-4), 0.0, n_pairs))),
        _batch_fields(triple, rng, n_pairs, np.exp(rng.uniform(np.log(0.05), np.log(5.0), n_pairs))),
    )
    s = triple.s_Ep
    nx, ny = triple.norms(X, s), triple.norms(Y, s)
    RX = np.where((nx <= n)[:, None], X, (n / nx)[:, None] * X)
    RY = np.where((ny <= n)[:, None], Y, (n / ny)[:, None] * Y)
    lhs = triple.norms(RX - RY, s)
    rhs = 2.0 * triple.norms(X - Y, s)
    violations = int(np.sum(lhs > rhs * (1 + 1e-12)))
    branch_errors = 0
    for i in range(min(500, n_pairs)):
        xi = X[i]
        out = truncate_Rn(xi, n, triple)
        ni = triple.norm_Ep(xi)
        if ni <= n:
            branch_errors += out is not xi
        else:
            branch_errors += not np.array_equal(out, (n / ni) * xi)
            branch_errors += abs(triple.norm_Ep(out) - n) > 1e-12 * n
        # batched norms may differ from single-field norms in the last bits
        branch_errors += not np.allclose(out, RX[i], rtol=1e-12, atol=0.0)
    inside = int(np.sum(nx <= n))
    details = {
        "pairs": n_pairs,
        "inside_fraction": inside / n_pairs,
        "lipschitz_violations": violations,
        "branch_errors": int(branch_errors),
        "max_ratio": float(np.max(lhs / np.where(rhs > 0, rhs / 2, np.inf))),
    }
    details["headline"] = f"violations={violations}/{n_pairs} branch_errors={branch_errors}"
    return violations == 0 and branch_errors == 0 and 0 < inside < n_pairs, details


# quasilinearity -------------------------------------------------------------------------------


def _monitor(triple: SpaceTriple, path: np.ndarray, anchor: np.ndarray, dt: float) -> np.ndarray:
    sup = np.maximum.accumulate(triple.norms(path[1:] - anchor, triple.s_Ep))
    e1 = triple.norms(path[1:], triple.s_E1)
    lp = (dt * np.cumsum(e1**triple.p)) ** (1.0 / triple.p)
    return np.concatenate([[0.0], sup + lp])


def _lp(triple: SpaceTriple, values: np.ndarray, dt: float) -> float:
    return float((dt * np.sum(values**triple.p)) ** (1.0 / triple.p))


def _q_pair(model: ModelSpec, sigma: np.ndarray, U: np.ndarray, V: np.ndarray, lam: float, dt: float) -> dict:
    """Discrete ``Q`` norms and operator-difference ratios for one path pair."""
    T = model.triple
    A = model.apply_A
    M = U.shape[0] - 1
    th_u = theta_lambda(_monitor(T, U, sigma, dt), lam)
    th_v = theta_lambda(_monitor(T, V, sigma, dt), lam)
    Du = np.array([A(sigma, U[m]) - A(U[m], U[m]) for m in range(1, M + 1)])
    Dv = np.array([A(sigma, V[m]) - A(V[m], V[m]) for m in range(1, M + 1)])
    Qu, Qv = th_u[1:, None] * Du, th_v[1:, None] * Dv
    W = U[1:] - V[1:]
    Dvu = np.array([A(V[m], U[m]) - A(U[m], U[m]) for m in range(1, M + 1)])
    Dsw = np.array([A(sigma, W[m - 1]) - A(V[m], W[m - 1]) for m in range(1, M + 1)])
    nE = T.norms(np.concatenate([Qu, Qv, Qu - Qv, Du, Dv, Dvu, Dsw]), T.s_E).reshape(7, M)
    ep = T.norms(np.concatenate([U[1:] - sigma, V[1:] - sigma, W]), T.s_Ep).reshape(3, M)
    e1 = T.norms(np.concatenate([U[1:], V[1:], W]), T.s_E1).reshape(3, M)
    pos_u, pos_v = th_u[1:] > 0, th_v[1:] > 0

    def ratios(num, a, b, mask):
        den = a * b
        ok = mask & (den > 0)
        return num[ok] / den[ok]

    r = np.concatenate(
        [
            ratios(nE[3], ep[0], e1[0], pos_u),
            ratios(nE[4], ep[1], e1[1], pos_v),
            ratios(nE[5], ep[2], e1[0], pos_u & pos_v),
            ratios(nE[6], ep[1], e1[2], pos_u & pos_v),
        ]
    )
    return {
        "Qu": _lp(T, nE[0], dt),
        "Qv": _lp(T, nE[1], dt),
        "dQ": _lp(T, nE[2], dt),
        "dist": _lp(T, e1[2], dt) + float(np.max(ep[2])),
        "max_ratio": float(r.max()) if r.size else 0.0,
        "cut": bool(th_u[-1] < 1.0 or th_v[-1] < 1.0),
    }


@_timed("Q_bounds")
def check_q_bounds(quick: bool = False, seed: int = 0, n_pairs: int | None = None, N: int = 64):
    """Growth and Lipschitz bounds of the cut-off quasilinearity on random monitored path pairs."""
    n_pairs = n_pairs or (100 if quick else 1000)
    a, L_a = bounded_diffusivity(0.5)
    model = make_gdiv_model(a, triple=SpaceTriple(N=N), L_a=L_a)
    T = model.triple
    C_Q = estimate_C_Q(model, 200, seed=seed + 11)
    rng = np.random.default_rng([seed, 3])
    M, dt = 40, 1e-3
    results = []
    for _ in range(n_pairs):
        amp0 = rng.uniform(0.2, 2.0)
        sigma = _batch_fields(T, rng, 1, np.array([amp0]))[0]
        step = rng.uniform(0.02, 0.3)
        U = sigma + np.concatenate([np.zeros((1, T.n_nodes)), np.cumsum(_batch_fields(T, rng, M, np.full(M, step)), axis=0)])
        eta = step * np.exp(rng.uniform(np.log(1e-3), np.log(0.5)))
        V = U + np.concatenate([np.zeros((1, T.n_nodes)), np.cumsum(_batch_fields(T, rng, M, np.full(M, eta)), axis=0)])
        final = _monitor(T, U, sigma, dt)[-1]
        lam = final * rng.uniform(0.2, 1.2)
        res = _q_pair(model, sigma, U, V, lam, dt)
        res["lam"] = lam
        results.append(res)
    eps_h = max(0.0, max(r["max_ratio"] for r in results) - 1.0)
    growth_bad = lip_bad = 0
    worst_growth = worst_lip = 0.0
    for r in results:
        gb = 4 * C_Q * r["lam"] ** 2 * (1 + eps_h)
        lb = 6 * C_Q * r["lam"] * (1 + eps_h) * r["dist"]
        growth_bad += (r["Qu"] > gb) + (r["Qv"] > gb)
        lip_bad += r["dQ"] > lb
        worst_growth = max(worst_growth, r["Qu"] / gb, r["Qv"] / gb)
        if lb > 0:
            worst_lip = max(worst_lip, r["dQ"] / lb)
    details = {
        "pairs": n_pairs,
        "C_Q": C_Q,
        "eps_h": eps_h,
        "growth_violations": int(growth_bad),
        "lipschitz_violations": int(lip_bad),
        "worst_growth_fraction": worst_growth,
        "worst_lipschitz_fraction": worst_lip,
        "cut_fraction": float(np.mean([r["cut"] for r in results])),
    }
    details["headline"] = f"eps_h={eps_h:.3f} growth_bad={growth_bad} lip_bad={lip_bad}"
    return eps_h <= 0.5 and growth_bad == 0 and lip_bad == 0, details


# phi_n ----------------------------------------------------------------------------------------


def _outer_branch(x, n, alpha):
    ax = np.abs(x)
    val = n ** (alpha - 2) * (alpha * (alpha - 1) * ax**2 / 2 - alpha * (alpha - 2) * n * ax + (alpha - 1) * (alpha - 2) * n**2 / 2)
    der = np.sign(x) * n ** (alpha - 2) * (alpha * (alpha - 1) * ax - alpha * (alpha - 2) * n)
    return val, der


@_timed("phi_n")
def check_phi(quick: bool = False, seed: int = 0, n_grid: int | None = None):
    """Convergence, C^1 matching, convexity and the four moment inequalities of ``phi_n``."""
    n_grid = n_grid or 10**4
    xi = np.linspace(-10.0, 10.0, n_grid)
    tol = 1e-12
    bad = {"ineq": 0, "convex": 0, "match": 0, "converge": 0, "monotone": 0, "derivative": 0}
    worst_match = 0.0
    for alpha in (2.0, 3.0, 4.0, 6.0):
        prev = None
        for n in (1, 2, 3, 5, 8, 10):
            f, f1, f2 = phi_n(xi, n, alpha), dphi_n(xi, n, alpha), d2phi_n(xi, n, alpha)
            a1 = alpha * (alpha - 1)
            checks = [
                (np.abs(xi * f1), alpha * f),
                (np.abs(f1), alpha * (1 + f)),
                (xi**2 * f2, a1 * f),
                (f2, a1 * (1 + f)),
            ]
            for lhs, rhs in checks:
                bad["ineq"] += int(np.sum(lhs > rhs + tol * np.maximum(1.0, np.abs(rhs))))
            bad["convex"] += int(np.sum(f2 < 0))
            if alpha != 2:
                v_out, d_out = _outer_branch(np.array([n, -n], float), n, alpha)
                v_in = np.array([n**alpha, n**alpha])
                d_in = np.array([alpha * n ** (alpha - 1), -alpha * n ** (alpha - 1)])
                err = max(np.max(np.abs(v_out - v_in)), np.max(np.abs(d_out - d_in)))
                worst_match = max(worst_match, err)
                bad["match"] += err > 1e-10
            if prev is not None:
                bad["monotone"] += int(np.sum(f < prev - tol * np.maximum(1.0, prev)))
            prev = f
            # centred differences of the companions
            hstep = 1e-5
            fd1 = (phi_n(xi + hstep, n, alpha) - phi_n(xi - hstep, n, alpha)) / (2 * hstep)
            fd2 = (dphi_n(xi + hstep, n, alpha) - dphi_n(xi - hstep, n, alpha)) / (2 * hstep)
            bad["derivative"] += int(np.sum(np.abs(fd1 - f1) > 1e-5 * np.maximum(1.0, np.abs(f1))))
            bad["derivative"] += int(np.sum(np.abs(fd2 - f2) > 1e-4 * np.maximum(1.0, np.abs(f2))))
        exact = np.abs(xi) ** alpha
        bad["converge"] += int(np.sum(np.abs(phi_n(xi, 10, alpha) - exact) > tol * np.maximum(1.0, exact)))
        gaps = [np.max(np.abs(phi_n(xi, n, alpha) - exact)) for n in (1, 2, 4, 8, 10)]
        bad["converge"] += int(any(b > a + tol for a, b in zip(gaps, gaps[1:])))
    examples = [
        float(phi_n(0.0, 2, 4.0)) == 0.0,
        float(phi_n(1.0, 2, 4.0)) == 1.0,
        abs(float(phi_n(3.0, 2, 4.0)) - 72.0) < 1e-12,
    ]
    details = dict(bad, worst_c1_mismatch=worst_match, grid=n_grid, examples_ok=all(examples))
    details["headline"] = " ".join(f"{k}={v}" for k, v in bad.items())
    return all(v == 0 for v in bad.values()) and all(examples), details


# scheme oracles ---------------------------------------------------------------------------------


def _config(raw: dict, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(raw, overrides)


@_timed("ou_oracle")
def check_ou(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """Per-mode OU mean/variance within 3 standard errors and strong refinement slope."""
    n_paths = n_paths or (200 if quick else 1000)
    cfg = _config({"experiment": "ou_convergence", "n_paths": n_paths, "noise": {"seed": 1000 + seed}})
    model, u0 = build_model(cfg)
    res = ou_study(model, u0, cfg.params["dts"], cfg.noise["T"], n_paths, cfg.noise["seed"], cfg.params["ref_factor"])
    finest = res["levels"][-1]
    zmax = float(max(np.max(finest["z_mean"]), np.max(finest["z_var"])))
    details = {
        "n_paths": n_paths,
        "slope": res["slope"],
        "max_z": zmax,
        "strong_errors": [lv["strong_error"] for lv in res["levels"]],
        "z_mean": finest["z_mean"],
        "z_var": finest["z_var"],
    }
    details["headline"] = f"max_z={zmax:.2f} slope={res['slope']:.3f}"
    return zmax <= 3.0 and res["slope"] >= 0.4, details


@_timed("picard_contraction")
def check_picard(quick: bool = False, seed: int = 0, n_instances: int | None = None):
    """Contraction ratios past the second iteration on random small instances."""
    n_instances = n_instances or (3 if quick else 10)
    worst = 0.0
    bad = 0
    converged = 0
    for i in range(n_instances):
        op, model, u0, noise, lam, _ = picard_instance(seed + i, N=32, K=8)
        res = picard_solve(op, model, u0, noise, 0.05, 1e-10, 60, lam=lam)
        late = res.ratios[2:]
        bad += sum(r >= 1.0 for r in late)
        worst = max([worst] + late)
        converged += res.converged
    details = {"instances": n_instances, "ratio_violations": bad, "max_late_ratio": worst, "converged": converged}
    details["headline"] = f"max_ratio={worst:.3g} violations={bad}"
    return bad == 0, details


@_timed("localization_consistency")
def check_localization(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """Localized vs direct stepping: ``sup_t ||diff||_{E_p} / dt`` stable under dt halving."""
    n_paths = n_paths or (1 if quick else 3)
    cfg = _config({"experiment": "localized_run"})
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, cfg.noise["K"])
    T_end = 0.1
    dts = (1e-4, 5e-5, 2.5e-5)
    triple = model.triple
    runs = []
    spreads = []
    for lam_factor in (1.0, 0.2):
        b = derived.budget
        budget = SmallnessBudget(b.C_Q, b.L_F1, b.L_F2, b.L_B1, b.L_B2, b.lam * lam_factor)
        for i in range(n_paths):
            fine = sample_path(NoiseSpec(seed + i, cfg.noise["K"], int(round(T_end / dts[-1])), dts[-1]), 0)
            ratios, anchors = [], []
            for dt in dts:
                nz = coarsen(fine, int(round(dt / dts[-1])))
                path, rec = run_localized(model, u0, budget, nz, 0, T_end, Caps(min_segment_steps=1))
                ref = direct_path(model, u0, nz, 0.0, T_end)
                diff = float(np.max(triple.norms(path.states - ref, triple.s_Ep)))
                ratios.append(diff / dt)
                anchors.append(len(rec.anchors))
            spread = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
            spreads.append(spread)
            runs.append({"lam": budget.lam, "ratios": ratios, "anchors": anchors, "spread": spread})
    worst = max(spreads)
    details = {"runs": runs, "worst_spread": worst, "lam": derived.budget.lam}
    details["headline"] = f"worst_spread={worst:.3f}"
    return worst <= 2.0, details


@_timed("global_existence")
def check_global_existence(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """GDIV default desk scale: every seed reaches ``T``."""
    n_paths = n_paths or (10 if quick else 100)
    cfg = _config({"experiment": "localized_run"})
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, cfg.noise["K"])
    counts = {"reached_T": 0, "blow_up_flag": 0, "step_floor": 0}
    anchors = []
    for s in range(seed, seed + n_paths):
        spec = NoiseSpec(s, cfg.noise["K"], int(round(cfg.noise["T"] / cfg.noise["dt"])), cfg.noise["dt"])
        _, rec = run_localized(model, u0, derived.budget, spec, 0, None, Caps(**cfg.caps))
        counts[rec.termination] += 1
        anchors.append(len(rec.anchors))
    details = dict(counts, lam=derived.budget.lam, max_anchors=max(anchors), mean_anchors=float(np.mean(anchors)))
    details["headline"] = " ".join(f"{k}={v}" for k, v in counts.items())
    return counts["reached_T"] == n_paths, details


@_timed("moment_shape")
def check_moment_shape(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """Moment ratios ``lhs / (1 + ||u0||_{L^alpha})`` vary by less than a factor 2 over u0 scales."""
    n_paths = n_paths or (20 if quick else 200)
    cfg = _config({"experiment": "moment_verify", "n_paths": n_paths, "noise": {"seed": 500 + seed}})
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, cfg.noise["K"])
    spec = NoiseSpec(cfg.noise["seed"], cfg.noise["K"], int(round(cfg.noise["T"] / cfg.noise["dt"])), cfg.noise["dt"])

    def runner(u, i):
        return run_localized(model, u, derived.budget, spec, i, None, Caps(**cfg.caps))

    reports = moment_verify_many(model, model.field(u0), cfg.params["alphas"], n_paths, runner, cfg.params["scales"])
    spreads = {a: r.ratio_spread for a, r in reports.items()}
    valid = all(r.valid for r in reports.values())
    details = {
        "n_paths": n_paths,
        "spreads": {str(a): s for a, s in spreads.items()},
        "ratios": {str(a): r.ratios for a, r in reports.items()},
        "excluded": {str(a): r.n_excluded for a, r in reports.items()},
        "valid": valid,
    }
    details["headline"] = " ".join(f"alpha={a:g}:spread={s:.3f}" for a, s in spreads.items())
    return valid and all(s < 2.0 for s in spreads.values()), details


@_timed("ito_energy")
def check_ito(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """Refinement slopes of the discrete Ito energy residual."""
    n_paths = n_paths or (4 if quick else 20)
    out = {}
    for label, amp, paths in (("multiplicative", 0.1, n_paths), ("zero_noise", 0.0, 1)):
        cfg = _config({"experiment": "ito_residual", "n_paths": paths, "noise": {"seed": 300 + seed}}, **{"model.noise_amplitude": amp})
        model, u0 = build_model(cfg)
        derived = derive_budget(model, u0, cfg.budget, cfg.noise["K"])
        res = ito_study(cfg, derived.budget)
        out[label] = {"slope": res["slope"], "mean": res["mean"], "dts": res["dts"]}
    ok = out["multiplicative"]["slope"] >= 0.4 and out["zero_noise"]["slope"] >= 0.9
    out["headline"] = f"slope_mult={out['multiplicative']['slope']:.3f} slope_zero={out['zero_noise']['slope']:.3f}"
    return ok, out


@_timed("hierarchy_monotonicity")
def check_hierarchy(quick: bool = False, seed: int = 0, n_paths: int | None = None):
    """``sigma_n <= sigma_2n`` and bit-exact agreement of coupled levels before ``sigma_n``."""
    n_paths = n_paths or (5 if quick else 50)
    cfg = _config({"experiment": "truncation_hierarchy", "n_paths": n_paths, "noise": {"seed": 7 + seed}})
    model, u0 = build_model(cfg)
    levels = [float(x) for x in cfg.params["levels"]]
    derived = derive_budget(model, u0, cfg.budget, cfg.noise["K"], model.with_truncation(max(levels)))
    spec = NoiseSpec(cfg.noise["seed"], cfg.noise["K"], int(round(cfg.noise["T"] / cfg.noise["dt"])), cfg.noise["dt"])
    violations = mismatches = exits = 0
    sigmas = []
    for i in range(n_paths):
        res = run_truncated_hierarchy(model, u0, derived.budget, spec, i, None, levels, Caps(**cfg.caps))
        sig = [lv.sigma_n for lv in res.levels]
        sigmas.append(sig)
        violations += sum(a > b for a, b in zip(sig, sig[1:]))
        for k in range(len(levels) - 1):
            lo, hi = res.paths[k], res.paths[k + 1]
            e = res.levels[k].exit_index
            upto = lo.states.shape[0] if e is None else e
            exits += e is not None
            mismatches += not np.array_equal(lo.states[:upto], hi.states[:upto])
    S = np.array(sigmas)
    details = {
        "n_paths": n_paths,
        "violations": int(violations),
        "prefix_mismatches": int(mismatches),
        "exits_observed": int(exits),
        "mean_sigma": S.mean(axis=0),
        "lam": derived.budget.lam,
    }
    details["headline"] = f"violations={violations} mismatches={mismatches} exits={exits}"
    return violations == 0 and mismatches == 0 and exits > 0, details


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "theta": check_theta,
    "truncation": check_truncation,
    "q_bounds": check_q_bounds,
    "phi": check_phi,
    "ou": check_ou,
    "picard": check_picard,
    "localization": check_localization,
    "global_existence": check_global_existence,
    "moment_shape": check_moment_shape,
    "ito": check_ito,
    "hierarchy": check_hierarchy,
}
