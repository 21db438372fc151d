"""Frozen-coefficient segment solver, Picard iteration and MR-constant estimates.

Within a segment the operator is frozen at the anchor state ``u_sigma``.  One
step of the semi-implicit Euler-Maruyama scheme reads::

    (I + dt A(u_sigma)) u+ = u + dt [theta (A(u_sigma) - A(u)) u + F(t, u) + f(t)]
                             + (B(t, u) + b(t)) dW

so only the frozen operator is implicit and its factorization is reused for
every step of the segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.lapack import dpttrf, dpttrs

from .errors import BlowUpSignal, ConfigurationError, NoContractionError, SmallnessError, SolverError
from .models import ModelSpec
from .noise import NoisePath, NoiseSpec, sample_path
from .spaces import GridField, MonitorAccumulator, MonitorSeries, SpaceTriple, noise_norm, theta_lambda

__all__ = [
    "DiscreteOperator",
    "SegmentResult",
    "MRConstants",
    "SmallnessBudget",
    "PicardResult",
    "assemble_operator",
    "semi_implicit_step",
    "solve_frozen_segment",
    "direct_path",
    "truncated_quasilinearity",
    "picard_solve",
    "deterministic_mr_ratio",
    "stochastic_mr_ratio",
    "estimate_mr_constants",
    "choose_lambda",
]


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, GridField) else np.asarray(u, dtype=float)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """``A_h`` frozen at an anchor state.

    ``matrix`` is the assembled sparse operator including the shift.  For the
    1D Dirichlet divergence stencil the symmetric tridiagonal diagonals are
    kept as well and ``I + dt A`` is factorized by LAPACK ``pttrf``.
    ``flux`` holds the flux-point coefficients of divergence-form operators.
    """

    matrix: sp.csc_matrix
    shift: float
    anchor: np.ndarray
    form: str = "divergence"
    flux: list | None = None
    tridiagonal: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def symmetric(self) -> bool:
        if "symmetric" not in self._cache:
            diff = abs(self.matrix - self.matrix.T)
            scale = max(abs(self.matrix).max(), 1.0)
            self._cache["symmetric"] = bool(diff.max() <= 1e-12 * scale) if diff.nnz else True
        return self._cache["symmetric"]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def _factor(self, dt: float):
        key = ("factor", dt)
        fac = self._cache.get(key)
        if fac is None:
            if self.tridiagonal is not None:
                main, off = self.tridiagonal
                d, e, info = dpttrf(1.0 + dt * main, dt * off)
                if info != 0:
                    raise SolverError(f"tridiagonal factorization failed (info={info})")
                fac = ("pt", d, e)
            else:
                try:
                    fac = ("lu", spla.splu((sp.identity(self.n, format="csc") + dt * self.matrix).tocsc()))
                except RuntimeError as exc:
                    raise SolverError(str(exc)) from exc
            self._cache[key] = fac
        return fac

    def solve(self, rhs: np.ndarray, dt: float) -> np.ndarray:
        """Solve ``(I + dt A) x = rhs``; ``rhs`` may hold several columns."""
        fac = self._factor(dt)
        if fac[0] == "pt":
            x, info = dpttrs(fac[1], fac[2], rhs)
            if info != 0:
                raise SolverError(f"tridiagonal solve failed (info={info})")
            return x
        return fac[1].solve(rhs)

    def eigen(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense eigen-factorization ``A = V diag(lam) V^{-1}``."""
        if "eigen" not in self._cache:
            dense = self.matrix.toarray()
            if self.symmetric:
                lam, V = np.linalg.eigh(0.5 * (dense + dense.T))
                Vinv = V.T
            else:
                lam, V = np.linalg.eig(dense)
                order = np.argsort(lam.real)
                lam, V = lam[order], V[:, order]
                Vinv = np.linalg.inv(V)
            self._cache["eigen"] = (lam, V, Vinv)
        return self._cache["eigen"]

    def semigroup(self, t: float) -> np.ndarray:
        """Dense ``exp(-t A)``."""
        key = ("semigroup", t)
        if key not in self._cache:
            if self.symmetric:
                lam, V, Vinv = self.eigen()
                S = (V * np.exp(-t * lam)) @ Vinv
            else:
                S = sla.expm(-t * self.matrix.toarray())
            self._cache[key] = np.real(S)
        return self._cache[key]


def assemble_operator(model: ModelSpec, anchor) -> DiscreteOperator:
    """Freeze ``A`` at ``anchor`` (after truncation, if the model has one)."""
    av = np.ravel(_values(anchor)).copy()
    if not np.all(np.isfinite(av)):
        raise ConfigurationError("anchor must be finite")
    matrix = model.assemble(av)
    flux = tri = None
    if model.form == "divergence":
        flux = model.half_point_coefficients(model.retract(av))
        if model.triple.d == 1 and model.boundary == "dirichlet":
            tri = (matrix.diagonal().copy(), matrix.diagonal(1).copy())
    return DiscreteOperator(matrix, model.shift, av, model.form, flux, tri)


def _correction(op: DiscreteOperator, model: ModelSpec, u: np.ndarray, ur: np.ndarray) -> np.ndarray:
    """``(A(u_sigma) - A(R u)) u``; the shift cancels."""
    if op.form == "divergence":
        cur = model.half_point_coefficients(ur)
        return model.flux_apply([s - c for s, c in zip(op.flux, cur)], u)
    return op.apply(u) - model.assemble(ur, check=False) @ u


def _advance(u: np.ndarray, op: DiscreteOperator, model: ModelSpec, theta: float, t: float, dt: float, dW) -> np.ndarray:
    ur = model.retract(u)
    rhs = u + dt * model.drift(t, u, ur)
    if theta != 0.0 and not model.constant_a:
        rhs = rhs + (dt * theta) * _correction(op, model, u, ur)
    if dW is not None and model.has_noise:
        rhs = rhs + model.noise_term(t, u, dW, ur)
    return op.solve(rhs, dt)


def semi_implicit_step(u, op: DiscreteOperator, model: ModelSpec, theta: float, t: float, dt: float, dW) -> GridField:
    """One semi-implicit Euler-Maruyama step with the frozen operator ``op``.

    Raises :class:`BlowUpSignal` carrying ``u`` when the result is not finite.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    if not 0.0 <= theta <= 1.0:
        raise ConfigurationError("theta must lie in [0, 1]")
    uv = np.ravel(_values(u))
    with np.errstate(all="ignore"):
        out = _advance(uv, op, model, theta, t, dt, dW)
    if not np.all(np.isfinite(out)):
        raise BlowUpSignal(uv.copy(), t)
    return model.field(out)


def truncated_quasilinearity(u, u_anchor, theta: float, model: ModelSpec) -> GridField:
    """``theta (A(u_anchor) - A(u)) u`` on the grid."""
    if not 0.0 <= theta <= 1.0:
        raise ConfigurationError("theta must lie in [0, 1]")
    uv = np.ravel(_values(u))
    av = np.ravel(_values(u_anchor))
    model.check_ellipticity(model.retract(av))
    model.check_ellipticity(model.retract(uv))
    if theta == 0.0:
        return model.field(np.zeros_like(uv))
    return model.field(theta * (model.apply_A(av, uv) - model.apply_A(uv, uv)))


@dataclass
class SegmentResult:
    """Solution on one frozen-coefficient segment.

    ``states[0]`` is the anchor; ``states[i]`` is the state after step ``i``
    at ``times[i]``.  ``theta_history[i]`` is the cut-off used for step
    ``i + 1``.  ``stop_index`` is the first ``i`` whose monitor exceeds
    lambda.  ``capped`` marks a state beyond the field cap and ``blown_up``
    a non-finite step (the non-finite state itself is not stored).
    """

    states: np.ndarray
    times: np.ndarray
    monitor: MonitorSeries
    theta_history: np.ndarray
    stop_index: int | None
    first_step: int
    capped: bool = False
    blown_up: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def fields(self, model: ModelSpec) -> list[GridField]:
        return [model.field(s) for s in self.states]


@dataclass(frozen=True)
class SmallnessBudget:
    """Constants entering the smallness condition of the frozen problem."""

    C_Q: float
    L_F1: float = 0.0
    L_F2: float = 0.0
    L_B1: float = 0.0
    L_B2: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("C_Q", "L_F1", "L_F2", "L_B1", "L_B2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")

    def contraction_number(self, mr: "MRConstants") -> float:
        """``C_MRD (6 C_Q lam + L_F1 + L_F2) + C_MRS (L_B1 + L_B2)``."""
        return mr.c_mrd_hat * (6.0 * self.C_Q * self.lam + self.L_F1 + self.L_F2) + mr.c_mrs_hat * (self.L_B1 + self.L_B2)

    def validate(self, mr: "MRConstants") -> "SmallnessBudget":
        if not self.contraction_number(mr) < 1.0:
            raise SmallnessError()
        return self


def _noise_rows(noise: NoisePath | None, m0: int, m1: int) -> np.ndarray | None:
    if noise is None:
        return None
    return noise.rows(m0, m1)


def solve_frozen_segment(
    u_anchor,
    model: ModelSpec,
    budget: SmallnessBudget,
    noise: NoisePath,
    t0: float,
    t_end: float,
    triple: SpaceTriple | None = None,
    field_cap: float | None = None,
    dt: float | None = None,
) -> SegmentResult:
    """Step from ``t0`` until ``t_end`` or the first monitor exceedance.

    The cut-off for step ``m + 1`` is evaluated from the monitor after step
    ``m``, so the scheme never looks ahead.  A non-finite step ends the
    segment with ``blown_up`` set; the last finite state is the final entry.
    """
    triple = triple or model.triple
    dt = noise.dt if noise is not None else dt
    if dt is None or not dt > 0:
        raise ConfigurationError("dt must be positive")
    m0, m1 = int(round(t0 / dt)), int(round(t_end / dt))
    if m1 <= m0:
        raise ConfigurationError("segment must contain at least one step")
    anchor = np.ravel(_values(u_anchor)).astype(float)
    op = assemble_operator(model, anchor)
    dW = _noise_rows(noise, m0, m1)
    lam = budget.lam
    acc = MonitorAccumulator(triple, anchor, m0 * dt, dt)
    states = [anchor]
    thetas = []
    theta = 1.0
    stop = None
    capped = blown = False
    u = anchor
    for i in range(m1 - m0):
        m = m0 + i
        with np.errstate(all="ignore"):
            new = _advance(u, op, model, theta, m * dt, dt, None if dW is None else dW[i])
        if not np.all(np.isfinite(new)):
            blown = True
            break
        thetas.append(theta)
        states.append(new)
        value = acc.update(new)
        u = new
        if field_cap is not None and acc.last_Ep > field_cap:
            capped = True
            break
        if value > lam:
            stop = i + 1
            break
        theta = theta_lambda(value, lam)
    n = len(states)
    return SegmentResult(
        states=np.array(states),
        times=(m0 + np.arange(n)) * dt,
        monitor=acc.series(),
        theta_history=np.array(thetas),
        stop_index=stop,
        first_step=m0,
        capped=capped,
        blown_up=blown,
    )


def direct_path(model: ModelSpec, u0, noise: NoisePath, t0: float, t_end: float) -> np.ndarray:
    """Reference scheme that reassembles ``A(u)`` at every step.

    ``(I + dt A(u_m)) u_{m+1} = u_m + dt F(t_m, u_m) + B(u_m) dW_m``.
    """
    dt = noise.dt
    m0, m1 = int(round(t0 / dt)), int(round(t_end / dt))
    dW = noise.rows(m0, m1)
    u = np.ravel(_values(u0)).astype(float)
    out = [u]
    for i in range(m1 - m0):
        op = assemble_operator(model, u)
        u = _advance(u, op, model, 0.0, (m0 + i) * dt, dt, dW[i])
        if not np.all(np.isfinite(u)):
            raise BlowUpSignal(out[-1], (m0 + i) * dt)
        out.append(u)
    return np.array(out)


# Picard iteration -----------------------------------------------------------------


@dataclass
class PicardResult:
    """Fixed point of the discrete mild-solution map and its convergence history."""

    path: np.ndarray
    distances: list[float]
    ratios: list[float]
    iterations: int
    converged: bool


def _path_distance(triple: SpaceTriple, diff: np.ndarray, dt: float) -> float:
    """``||.||_{L^p(E^1)} + ||.||_{C(E_p)}`` over stored times ``1..M``."""
    if diff.shape[0] <= 1:
        return 0.0
    blocks = triple.block_norms(diff[1:])
    e1 = triple.combine(blocks, triple.s_E1, triple.p)
    ep = triple.combine(blocks, triple.s_Ep, triple.p)
    scale = e1.max()
    lp = 0.0 if scale == 0 else scale * (dt * np.sum((e1 / scale) ** triple.p)) ** (1.0 / triple.p)
    return float(lp + ep.max())


def _path_theta(triple: SpaceTriple, path: np.ndarray, anchor: np.ndarray, dt: float, lam: float) -> np.ndarray:
    """Cut-off values ``theta_m`` from the monitor of ``path`` through ``t_m``."""
    M = path.shape[0] - 1
    theta = np.ones(M + 1)
    if M == 0:
        return theta
    blocks_d = triple.block_norms(path[1:] - anchor)
    blocks_u = triple.block_norms(path[1:])
    sup = np.maximum.accumulate(triple.combine(blocks_d, triple.s_Ep, triple.p))
    e1 = triple.combine(blocks_u, triple.s_E1, triple.p)
    lp = (dt * np.cumsum(e1**triple.p)) ** (1.0 / triple.p)
    theta[1:] = theta_lambda(sup + lp, lam)
    return theta


def picard_solve(
    op: DiscreteOperator,
    model: ModelSpec,
    u0,
    noise: NoisePath,
    kappa: float,
    tol: float = 1e-10,
    max_iter: int = 50,
    lam: float | None = None,
    t0: float = 0.0,
) -> PicardResult:
    """Iterate the discrete mild-solution map on ``[t0, t0 + kappa]``.

    ``K phi(t_{m+1}) = S (K phi(t_m) + dt (F(phi_m) + f + Q(phi_m)) + (B(phi_m) + b) dW_m)``
    with ``S = exp(-dt A)`` and left-endpoint (Ito) sums.  ``Q`` is the cut-off
    correction ``theta (A(u_0) - A(phi)) phi``, included when ``lam`` is given;
    ``op`` should then be frozen at ``u0``.  Distances use the unweighted
    ``L^p(E^1) + C(E_p)`` path norm.
    """
    dt = noise.dt
    m0 = int(round(t0 / dt))
    M = int(round(kappa / dt))
    if M < 1:
        raise ConfigurationError("kappa must span at least one step")
    dW = noise.rows(m0, m0 + M)
    triple = model.triple
    S = op.semigroup(dt)
    u0v = np.ravel(_values(u0)).astype(float)
    times = (m0 + np.arange(M)) * dt

    def K(phi: np.ndarray) -> np.ndarray:
        theta = _path_theta(triple, phi, u0v, dt, lam) if lam is not None else None
        incr = np.empty((M, u0v.size))
        for m in range(M):
            x = phi[m]
            xr = model.retract(x)
            g = model.drift(times[m], x, xr)
            if theta is not None and theta[m] != 0.0 and not model.constant_a:
                g = g + theta[m] * (op.apply(x) - model.apply_A(x, x))
            incr[m] = dt * g
            if model.has_noise:
                incr[m] += model.noise_term(times[m], x, dW[m], xr)
        out = np.empty((M + 1, u0v.size))
        out[0] = u0v
        for m in range(M):
            out[m + 1] = S @ (out[m] + incr[m])
        return out

    phi = np.tile(u0v, (M + 1, 1))
    distances: list[float] = []
    ratios: list[float] = []
    for k in range(1, max_iter + 1):
        new = K(phi)
        if not np.all(np.isfinite(new)):
            raise NoContractionError("no contraction", ratios)
        dist = _path_distance(triple, new - phi, dt)
        if distances:
            ratios.append(dist / distances[-1] if distances[-1] > 0 else 0.0)
        distances.append(dist)
        phi = new
        if dist < tol:
            return PicardResult(phi, distances, ratios, k - 1, True)
    if ratios and ratios[-1] >= 1.0:
        raise NoContractionError("no contraction", ratios)
    return PicardResult(phi, distances, ratios, max_iter, False)


# maximal-regularity constants --------------------------------------------------------


@dataclass
class MRConstants:
    """Empirical maximal-regularity constants (running maxima of sample ratios)."""

    c_mrd_hat: float
    c_mrs_hat: float
    n_samples: int
    deterministic_ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stochastic_ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.c_mrd_hat < 0 or self.c_mrs_hat < 0:
            raise ConfigurationError("MR constants must be nonnegative")


def _convolve(S: np.ndarray, incr: np.ndarray) -> np.ndarray:
    """``u_0 = 0, u_{m+1} = S (u_m + incr_m)`` for each column batch.

    ``incr`` has shape ``(M, n)`` or ``(M, n, B)``.
    """
    M = incr.shape[0]
    out = np.zeros((M + 1,) + incr.shape[1:])
    for m in range(M):
        out[m + 1] = S @ (out[m] + incr[m])
    return out


def _lp_time(values: np.ndarray, dt: float, p: float) -> float:
    scale = values.max() if values.size else 0.0
    if scale == 0:
        return 0.0
    return float(scale * (dt * np.sum((values / scale) ** p)) ** (1.0 / p))


def deterministic_mr_ratio(S: np.ndarray, triple: SpaceTriple, h_path: np.ndarray, dt: float) -> float:
    """Discrete ratio ``(||u||_{L^p(E^1)} + ||u||_{C(E_p)}) / ||h||_{L^p(E)}``.

    ``u`` is the left-rectangle convolution of ``h`` with ``S = exp(-dt A)``.
    Returns ``nan`` for a zero integrand.
    """
    h_path = np.reshape(h_path, (h_path.shape[0], -1))
    den = _lp_time(triple.norms(h_path, triple.s_E), dt, triple.p)
    if den == 0:
        return math.nan
    u = _convolve(S, dt * h_path)
    return _path_distance(triple, u, dt) / den


def stochastic_mr_ratio(S: np.ndarray, triple: SpaceTriple, g_path: np.ndarray, dW: np.ndarray, dt: float) -> float:
    """Discrete ratio for the stochastic convolution.

    ``g_path`` has shape ``(M, K) + grid`` (a deterministic integrand) and
    ``dW`` shape ``(R, M, K)`` for ``R`` independent noise paths.  The
    numerator is the ``L^p(Omega)`` mean of the path norm over the ``R``
    paths and the denominator ``||g||_{L^p(gamma(l^2, E^{1/2}))}``.
    """
    M, K = g_path.shape[:2]
    g_path = np.reshape(g_path, (M, K, -1))
    dW = np.reshape(np.asarray(dW, dtype=float), (-1, M, K))
    gnorm = np.array([noise_norm(g_path[m].reshape((K,) + triple.shape), triple) for m in range(M)])
    den = _lp_time(gnorm, dt, triple.p)
    if den == 0:
        return math.nan
    incr = np.einsum("mkn,rmk->mnr", g_path, dW)
    u = _convolve(S, incr)
    nums = np.array([_path_distance(triple, u[:, :, r], dt) for r in range(dW.shape[0])])
    return float(np.mean(nums**triple.p) ** (1.0 / triple.p) / den)


def _random_step_function(rng: np.random.Generator, M: int, basis: np.ndarray, lead: tuple[int, ...] = ()) -> np.ndarray:
    """Piecewise-constant-in-time random fields with random spectral decay."""
    n_pieces = int(rng.integers(1, 9))
    cuts = np.sort(rng.choice(np.arange(1, M), size=min(n_pieces - 1, M - 1), replace=False)) if M > 1 else []
    edges = np.concatenate(([0], cuts, [M])).astype(int)
    n_basis = basis.shape[0]
    weights = np.arange(1, n_basis + 1, dtype=float)
    out = np.empty((M,) + lead + (basis.shape[1],))
    for lo, hi in zip(edges[:-1], edges[1:]):
        decay = rng.uniform(0.0, 2.5)
        c = rng.standard_normal(lead + (n_basis,)) * weights ** (-decay)
        out[lo:hi] = c @ basis
    return out


def estimate_mr_constants(
    op: DiscreteOperator,
    triple: SpaceTriple,
    spec: NoiseSpec,
    n_samples: int,
    seed: int = 0,
    n_inner: int = 4,
) -> MRConstants:
    """Running-max estimates of the deterministic and stochastic MR constants.

    Sample ``i`` depends only on ``(seed, i)``, so estimates for nested sample
    counts are nondecreasing.  The time grid is ``spec.n_steps`` steps of
    ``spec.dt``; the stochastic integrands use ``spec.n_modes`` modes and
    ``n_inner`` noise paths per sample.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    M, dt, K = spec.n_steps, spec.dt, spec.n_modes
    S = op.semigroup(dt)
    _, basis = triple.modes(triple.n_nodes)
    basis = basis.reshape(triple.n_nodes, -1)
    det, sto = [], []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        h_path = _random_step_function(rng, M, basis)
        g_path = _random_step_function(rng, M, basis, (K,))
        dW = np.stack([sample_path(spec, i * n_inner + r).increments for r in range(n_inner)])
        det.append(deterministic_mr_ratio(S, triple, h_path, dt))
        sto.append(stochastic_mr_ratio(S, triple, g_path, dW, dt))
    det_a, sto_a = np.array(det), np.array(sto)
    if np.all(np.isnan(det_a)) or np.all(np.isnan(sto_a)):
        raise ConfigurationError("all MR samples had zero norm")
    return MRConstants(float(np.nanmax(det_a)), float(np.nanmax(sto_a)), n_samples, det_a, sto_a)


def choose_lambda(
    C_Q: float,
    L_F1: float,
    L_F2: float,
    L_B1: float,
    L_B2: float,
    mr: MRConstants,
    margin: float = 0.6,
    lambda_max: float = 1e3,
) -> float:
    """Largest admissible cut-off radius for a given safety margin.

    ``lam = (margin - C_MRD (L_F1 + L_F2) - C_MRS (L_B1 + L_B2)) / (6 C_Q C_MRD)``
    capped at ``lambda_max``.
    """
    if not 0.0 < margin < 1.0:
        raise ConfigurationError("margin must lie in (0, 1)")
    slack = margin - mr.c_mrd_hat * (L_F1 + L_F2) - mr.c_mrs_hat * (L_B1 + L_B2)
    if not slack > 0:
        raise SmallnessError()
    denom = 6.0 * C_Q * mr.c_mrd_hat
    lam = lambda_max if denom <= 0 else min(slack / denom, lambda_max)
    SmallnessBudget(C_Q, L_F1, L_F2, L_B1, L_B2, lam).validate(mr)
    return lam
