"""Concrete quasilinear models and model-level verifiers.

Two model families are provided.

* Divergence form on ``(0, 1)^d`` with Dirichlet data::

      du = [div(a(u) grad u) - gamma u + div G(u) + F(t, u) + f(t)] dt
           + sum_k [beta_k g(u) + b_k] e_k dW_k

* Non-divergence form on the torus::

      du = [sum_ij a_ij(x, u, grad u) d_i d_j u - gamma u + ...] dt + ...

``e_k`` are the discrete eigenfunctions of the reference operator, so the
noise is a spectral Galerkin truncation of a cylindrical Wiener process.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, EllipticityError
from .spaces import GridField, SpaceTriple, _gradient

__all__ = [
    "ModelSpec",
    "MomentReport",
    "make_gdiv_model",
    "make_nondivergence_model",
    "bounded_diffusivity",
    "ou_oracle",
    "phi_n",
    "dphi_n",
    "d2phi_n",
    "sup_moment",
    "moment_verify",
    "moment_verify_many",
    "ito_energy_residual",
    "gauss_defect",
    "estimate_C_Q",
    "operator_difference_ratio",
    "estimate_lipschitz",
    "random_smooth_field",
    "decay_weights",
]

FORMS = ("divergence", "nondivergence")


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, GridField) else np.asarray(u, dtype=float)


def _difference_matrix(n_interior: int, h: float, boundary: str) -> sp.csr_matrix:
    """Forward differences onto the half grid.

    Dirichlet: maps ``n`` interior values to ``n + 1`` half-point slopes using
    the zero boundary.  Periodic: ``n`` to ``n`` with wrap-around.
    """
    n = n_interior
    if boundary == "dirichlet":
        D = sp.diags([-np.ones(n), np.ones(n)], [-1, 0], shape=(n + 1, n))
    else:
        D = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n)).tolil()
        D[n - 1, 0] = 1.0
    return sp.csr_matrix(D) / h


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Coefficients and constants of one quasilinear model.

    Attributes
    ----------
    form : {"divergence", "nondivergence"}
    triple : SpaceTriple
        Grid and norms.
    a : callable
        Divergence form: ``a(u)`` elementwise.  Non-divergence form:
        ``a(x, u, grad)`` returning ``(d, d) + shape`` (or ``shape`` if d = 1),
        where ``x`` and ``grad`` are tuples of arrays.
    G : callable, optional
        Convective flux ``u -> G(u)`` (a tuple of ``d`` arrays when d = 2).
    F : callable, optional
        Extra drift ``F(t, u)``.
    g : callable, optional
        Multiplicative noise profile; mode ``k`` is ``beta_k g(u) e_k``.
    noise_weights : array (K,)
        ``beta_k``.
    additive : array (K,), optional
        ``b_k``; mode ``k`` of the additive noise is ``b_k e_k``.
    forcing : callable, optional
        ``f(t)`` returning a grid array.
    shift : float
        Spectral shift ``gamma`` added to the operator.
    compensate_shift : bool
        Add ``gamma u`` back into the drift so the shift does not alter the
        equation.
    truncation : float, optional
        When set, ``a``, ``G``, ``F`` and ``g`` see ``R_n(u)``, the radial
        retraction onto the ``E_p`` ball of this radius.
    """

    form: str
    triple: SpaceTriple
    a: Callable
    G: Callable | None = None
    F: Callable | None = None
    g: Callable | None = None
    noise_weights: np.ndarray = field(default_factory=lambda: np.zeros(1))
    additive: np.ndarray | None = None
    forcing: Callable | None = None
    delta0: float = 1.0
    shift: float = 1.0
    compensate_shift: bool = False
    C_Q: float = 0.0
    L_a: float = 0.0
    L_G: float = 0.0
    L_B: float = 0.0
    constant_a: bool = False
    truncation: float | None = None
    name: str = ""
    modes: np.ndarray = field(init=False, repr=False)
    mode_eigenvalues: np.ndarray = field(init=False, repr=False)
    _D: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigurationError(f"unknown form {self.form!r}")
        if not self.delta0 > 0:
            raise ConfigurationError("ellipticity floor delta0 must be positive")
        if self.shift < 0:
            raise ConfigurationError("shift must be nonnegative")
        if self.truncation is not None and not self.truncation > 0:
            raise ConfigurationError("truncation level must be positive")
        w = np.atleast_1d(np.asarray(self.noise_weights, dtype=float))
        object.__setattr__(self, "noise_weights", w)
        K = w.size
        if self.additive is not None:
            b = np.atleast_1d(np.asarray(self.additive, dtype=float))
            if b.size != K:
                raise ConfigurationError("additive weights must match the number of modes")
            object.__setattr__(self, "additive", b)
        lam, E = self.triple.modes(K)
        object.__setattr__(self, "modes", E.reshape(K, -1))
        object.__setattr__(self, "mode_eigenvalues", lam)
        object.__setattr__(self, "_D", self._difference_operators())

    # structure ---------------------------------------------------------------
    @property
    def n_modes(self) -> int:
        return int(self.noise_weights.size)

    @property
    def n_nodes(self) -> int:
        return self.triple.n_nodes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.triple.shape

    @property
    def h(self) -> float:
        return self.triple.h

    @property
    def boundary(self) -> str:
        return self.triple.boundary

    @property
    def has_noise(self) -> bool:
        return (self.g is not None and np.any(self.noise_weights)) or (
            self.additive is not None and np.any(self.additive)
        )

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def with_truncation(self, n: float | None) -> "ModelSpec":
        return self.replace(truncation=n)

    def field(self, values) -> GridField:
        return self.triple.field(values)

    def _difference_operators(self):
        n1 = self.shape[0]
        D1 = _difference_matrix(n1, self.h, self.boundary)
        if self.triple.d == 1:
            return (D1,)
        eye = sp.identity(n1, format="csr")
        return (sp.kron(D1, eye, format="csr"), sp.kron(eye, D1, format="csr"))

    # truncation ----------------------------------------------------------------
    def retract(self, u: np.ndarray) -> np.ndarray:
        """``R_n u``; returns the input object itself inside the ball."""
        if self.truncation is None:
            return u
        norm = self.triple.norm_Ep(u)
        if norm <= self.truncation:
            return u
        return (self.truncation / norm) * u

    # operator ------------------------------------------------------------------
    def _padded(self, u: np.ndarray) -> np.ndarray:
        if self.boundary != "dirichlet":
            return u.reshape(self.shape)
        if self.triple.d == 1:
            return np.concatenate(([0.0], u, [0.0]))
        return np.pad(u.reshape(self.shape), 1)

    def half_point_coefficients(self, y: np.ndarray) -> list[np.ndarray]:
        """Arithmetic means of ``a(y)`` on the flux points, one array per axis."""
        yp = self._padded(y)
        ap = np.asarray(self.a(yp), dtype=float)
        if ap.shape != yp.shape:
            ap = np.broadcast_to(ap, yp.shape)
        d = self.triple.d
        if d == 1:
            if self.boundary == "dirichlet":
                return [0.5 * (ap[:-1] + ap[1:])]
            return [0.5 * (ap + np.roll(ap, -1))]
        out = []
        for ax in range(d):
            if self.boundary == "dirichlet":
                lo = [slice(None)] * d
                hi = [slice(None)] * d
                lo[ax], hi[ax] = slice(0, -1), slice(1, None)
                mid = 0.5 * (ap[tuple(lo)] + ap[tuple(hi)])
                keep = [slice(1, -1)] * d
                keep[ax] = slice(None)
                out.append(mid[tuple(keep)].ravel())
            else:
                out.append((0.5 * (ap + np.roll(ap, -1, axis=ax))).ravel())
        return out

    def nondivergence_coefficients(self, y: np.ndarray) -> np.ndarray:
        """``a_ij(x, y, grad y)`` as an array of shape ``(d, d, n_nodes)``."""
        yy = y.reshape(self.shape)
        comps, _ = _gradient(yy, self.h, self.boundary)
        A = np.asarray(self.a(self.triple.points(), yy, tuple(comps)), dtype=float)
        d = self.triple.d
        if d == 1 and A.ndim == 1:
            A = A[None, None, :]
        A = np.broadcast_to(A, (d, d) + self.shape)
        return A.reshape(d, d, -1)

    def check_ellipticity(self, y: np.ndarray) -> None:
        if self.form == "divergence":
            ap = np.asarray(self.a(np.ravel(y)), dtype=float)
            if np.any(~np.isfinite(ap)) or np.any(ap <= 0):
                raise EllipticityError()
        else:
            A = self.nondivergence_coefficients(y)
            sym = 0.5 * (A + np.swapaxes(A, 0, 1))
            if self.triple.d == 1:
                low = sym[0, 0]
            else:
                tr = sym[0, 0] + sym[1, 1]
                det = sym[0, 0] * sym[1, 1] - sym[0, 1] ** 2
                low = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr**2 - det, 0.0))
            if np.any(~np.isfinite(low)) or np.any(low <= 0):
                raise EllipticityError()

    def _second_difference(self, i: int, j: int) -> sp.csr_matrix:
        D = self._D
        n1 = self.shape[0]
        if i == j:
            # periodic second difference D^T D with the sign of d_ii
            return -(D[i].T @ D[i]).tocsr()
        # mixed derivative by central differences on both axes
        C1 = sp.diags([-np.ones(n1 - 1), np.ones(n1 - 1)], [-1, 1], shape=(n1, n1)).tolil()
        C1[0, n1 - 1] = -1.0
        C1[n1 - 1, 0] = 1.0
        C1 = sp.csr_matrix(C1) / (2.0 * self.h)
        eye = sp.identity(n1, format="csr")
        return (sp.kron(C1, eye) @ sp.kron(eye, C1)).tocsr()

    def flux_apply(self, coeffs: list[np.ndarray], x: np.ndarray) -> np.ndarray:
        """``-div(a grad x)`` for given flux-point coefficients, without shift."""
        if self.triple.d == 1:
            if self.boundary == "dirichlet":
                xp = np.concatenate(([0.0], x, [0.0]))
                return -np.diff(coeffs[0] * np.diff(xp)) / self.h**2
            D = self._D[0]
            return D.T @ (coeffs[0] * (D @ x))
        out = np.zeros_like(x)
        for D, ah in zip(self._D, coeffs):
            out = out + D.T @ (ah * (D @ x))
        return out

    def assemble(self, y, check: bool = True) -> sp.csc_matrix:
        """Sparse matrix of ``A(R_n y)`` including the shift."""
        yv = self.retract(np.ravel(_values(y)))
        if check:
            self.check_ellipticity(yv)
        n = self.n_nodes
        if self.form == "divergence":
            coeffs = self.half_point_coefficients(yv)
            if self.triple.d == 1 and self.boundary == "dirichlet":
                ah = coeffs[0]
                main = (ah[:-1] + ah[1:]) / self.h**2 + self.shift
                off = -ah[1:-1] / self.h**2
                return sp.diags([off, main, off], [-1, 0, 1], format="csc")
            M = sp.csr_matrix((n, n))
            for D, ah in zip(self._D, coeffs):
                M = M + D.T @ sp.diags(ah) @ D
        else:
            A = self.nondivergence_coefficients(yv)
            M = sp.csr_matrix((n, n))
            d = self.triple.d
            for i in range(d):
                for j in range(d):
                    M = M - sp.diags(A[i, j]) @ self._second_difference(i, j)
        return (M + self.shift * sp.identity(n)).tocsc()

    def apply_A(self, y, x) -> np.ndarray:
        """Matrix-free ``A(R_n y) x`` with the same stencil as :meth:`assemble`."""
        yv = self.retract(np.ravel(_values(y)))
        xv = np.ravel(_values(x))
        if self.form == "divergence":
            return self.flux_apply(self.half_point_coefficients(yv), xv) + self.shift * xv
        return self.assemble(yv, check=False) @ xv

    # drift and noise -----------------------------------------------------------------
    def divergence_G(self, u: np.ndarray) -> np.ndarray:
        """Central-difference ``div G(u)``; Dirichlet data pad with ``G(0)``."""
        if self.G is None:
            return np.zeros(self.n_nodes)
        d = self.triple.d
        up = self._padded(u)
        Gp = self.G(up)
        if d == 1 and self.boundary == "dirichlet":
            Gp = np.asarray(Gp, dtype=float)
            if Gp.shape == up.shape:
                return (Gp[2:] - Gp[:-2]) / (2.0 * self.h)
        if d == 1:
            Gp = (Gp,)
        out = np.zeros(self.shape)
        for ax in range(d):
            comp = np.broadcast_to(np.asarray(Gp[ax], dtype=float), up.shape)
            if self.boundary == "dirichlet":
                fwd = [slice(1, -1)] * d
                bwd = [slice(1, -1)] * d
                fwd[ax], bwd[ax] = slice(2, None), slice(0, -2)
                out += (comp[tuple(fwd)] - comp[tuple(bwd)]) / (2.0 * self.h)
            else:
                out += (np.roll(comp, -1, axis=ax) - np.roll(comp, 1, axis=ax)) / (2.0 * self.h)
        return out.ravel()

    def drift(self, t: float, u, retracted: np.ndarray | None = None) -> np.ndarray:
        """Lower-order drift ``div G(R u) + F(t, R u) + f(t)`` (+ ``gamma u``)."""
        uv = np.ravel(_values(u))
        ur = self.retract(uv) if retracted is None else retracted
        out = self.divergence_G(ur)
        if self.F is not None:
            out = out + np.ravel(self.F(t, ur.reshape(self.shape)))
        if self.forcing is not None:
            out = out + np.ravel(self.forcing(t))
        if self.compensate_shift:
            out = out + self.shift * uv
        return out

    def noise_coeffs(self, t: float, u, retracted: np.ndarray | None = None) -> np.ndarray:
        """Noise coefficient fields ``B_k(u) + b_k``, shape ``(K, n_nodes)``."""
        uv = np.ravel(_values(u))
        ur = self.retract(uv) if retracted is None else retracted
        out = np.zeros((self.n_modes, self.n_nodes))
        if self.g is not None:
            out += self.noise_weights[:, None] * np.ravel(self.g(ur))[None, :] * self.modes
        if self.additive is not None:
            out += self.additive[:, None] * self.modes
        return out

    def noise_term(self, t: float, u, dW: np.ndarray, retracted: np.ndarray | None = None) -> np.ndarray:
        """``(B(u) + b) dW`` contracted over modes."""
        dW = np.asarray(dW, dtype=float)
        out = np.zeros(self.n_nodes)
        if self.g is not None:
            uv = np.ravel(_values(u))
            ur = self.retract(uv) if retracted is None else retracted
            out = out + np.ravel(self.g(ur)) * ((self.noise_weights * dW) @ self.modes)
        if self.additive is not None:
            out = out + (self.additive * dW) @ self.modes
        return out


# factories -------------------------------------------------------------------------


def bounded_diffusivity(kappa: float) -> tuple[Callable, float]:
    """``a(u) = 1 + kappa u^2 / (1 + u^2)`` and its Lipschitz constant.

    ``|a'(u)| = 2 kappa |u| / (1 + u^2)^2`` peaks at ``u = 1/sqrt(3)`` with
    value ``3 sqrt(3) kappa / 8``.
    """

    def a(u):
        u2 = u * u
        return 1.0 + kappa * u2 / (1.0 + u2)

    return a, 3.0 * math.sqrt(3.0) * abs(kappa) / 8.0


def _sample_floor(a: Callable, delta0: float, span: float = 50.0) -> None:
    u = np.linspace(-span, span, 4001)
    vals = np.asarray(a(u), dtype=float) * np.ones_like(u)
    if np.any(~np.isfinite(vals)) or np.min(vals) < delta0 * (1.0 - 1e-12):
        raise EllipticityError()


def decay_weights(n_modes: int, s_B: float = 1.5, amplitude: float = 1.0) -> np.ndarray:
    """``amplitude * k^(-s_B)`` for ``k = 1..K``."""
    return amplitude * np.arange(1, n_modes + 1, dtype=float) ** (-s_B)


def make_gdiv_model(
    a: Callable,
    G: Callable | None = None,
    g: Callable | None = None,
    *,
    triple: SpaceTriple | None = None,
    delta0: float = 1.0,
    n_modes: int = 16,
    s_B: float = 1.5,
    noise_amplitude: float = 1.0,
    additive: Sequence[float] | None = None,
    F: Callable | None = None,
    forcing: Callable | None = None,
    shift: float = 1.0,
    compensate_shift: bool = False,
    C_Q: float = 0.0,
    L_a: float = 0.0,
    L_G: float = 0.0,
    L_B: float = 0.0,
    constant_a: bool = False,
    truncation: float | None = None,
    name: str = "gdiv",
) -> ModelSpec:
    """Divergence-form convection-diffusion model with Dirichlet data.

    ``a`` must stay above ``delta0`` (checked on a sample of states).
    """
    if not delta0 > 0:
        raise ConfigurationError("ellipticity floor delta0 must be positive")
    triple = triple or SpaceTriple()
    if triple.boundary != "dirichlet" or triple.scale != "divergence_form":
        raise ConfigurationError("GDIV needs a Dirichlet divergence-form triple")
    _sample_floor(a, delta0)
    return ModelSpec(
        form="divergence",
        triple=triple,
        a=a,
        G=G,
        F=F,
        g=g,
        noise_weights=decay_weights(n_modes, s_B, noise_amplitude),
        additive=None if additive is None else np.asarray(additive, dtype=float),
        forcing=forcing,
        delta0=delta0,
        shift=shift,
        compensate_shift=compensate_shift,
        C_Q=C_Q,
        L_a=L_a,
        L_G=L_G,
        L_B=L_B,
        constant_a=constant_a,
        truncation=truncation,
        name=name,
    )


def make_nondivergence_model(
    a_ij: Callable,
    g: Callable | None = None,
    *,
    triple: SpaceTriple | None = None,
    delta0: float = 1.0,
    n_modes: int = 16,
    s_B: float = 1.5,
    noise_amplitude: float = 1.0,
    additive: Sequence[float] | None = None,
    F: Callable | None = None,
    forcing: Callable | None = None,
    shift: float = 1.0,
    compensate_shift: bool = False,
    C_Q: float = 0.0,
    L_a: float = 0.0,
    L_B: float = 0.0,
    sample_span: float = 10.0,
    truncation: float | None = None,
    name: str = "nondivergence",
) -> ModelSpec:
    """Non-divergence model ``sum a_ij(x, u, grad u) d_i d_j u`` on the torus.

    Ellipticity is sampled over the grid points, ``u`` and each gradient
    component in ``[-sample_span, sample_span]``.
    """
    triple = triple or SpaceTriple(N=64, scale="nondivergence_form", boundary="periodic")
    if triple.boundary != "periodic" or triple.scale != "nondivergence_form":
        raise ConfigurationError("the non-divergence model needs a periodic non-divergence triple")
    if not delta0 > 0:
        raise ConfigurationError("ellipticity floor delta0 must be positive")
    model = ModelSpec(
        form="nondivergence",
        triple=triple,
        a=a_ij,
        g=g,
        F=F,
        noise_weights=decay_weights(n_modes, s_B, noise_amplitude),
        additive=None if additive is None else np.asarray(additive, dtype=float),
        forcing=forcing,
        delta0=delta0,
        shift=shift,
        compensate_shift=compensate_shift,
        C_Q=C_Q,
        L_a=L_a,
        L_B=L_B,
        truncation=truncation,
        name=name,
    )
    pts = triple.points()
    for level in np.linspace(-sample_span, sample_span, 9):
        for slope in np.linspace(-sample_span, sample_span, 9):
            u = np.full(triple.shape, level)
            grad = tuple(np.full(triple.shape, slope) for _ in range(triple.d))
            A = np.asarray(a_ij(pts, u, grad), dtype=float)
            d = triple.d
            A = np.broadcast_to(A[None, None] if (d == 1 and A.ndim == 1) else A, (d, d) + triple.shape)
            sym = 0.5 * (A + np.swapaxes(A, 0, 1))
            if d == 1:
                low = sym[0, 0]
            else:
                tr = sym[0, 0] + sym[1, 1]
                det = sym[0, 0] * sym[1, 1] - sym[0, 1] ** 2
                low = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr**2 - det, 0.0))
            if np.min(low) < delta0 * (1.0 - 1e-12):
                raise EllipticityError()
    return model


# oracles and verifiers -----------------------------------------------------------------


def ou_oracle(lambda_k: float, b_k: float, t: float, u0_k: float) -> tuple[float, float]:
    """Mean and variance of ``dy = -lambda y dt + b dW`` at time ``t``."""
    if not lambda_k > 0:
        raise ConfigurationError("lambda_k must be positive")
    mean = u0_k * math.exp(-lambda_k * t)
    var = b_k**2 * (-math.expm1(-2.0 * lambda_k * t)) / (2.0 * lambda_k)
    return mean, var


def phi_n(xi, n: float, alpha: float):
    """Convex ``C^2`` approximant of ``|xi|^alpha`` with quadratic growth beyond ``n``."""
    x = np.asarray(xi, dtype=float)
    if alpha == 2:
        return x * x
    ax = np.abs(x)
    outer = n ** (alpha - 2) * (
        alpha * (alpha - 1) * x * x / 2.0 - alpha * (alpha - 2) * n * ax + (alpha - 1) * (alpha - 2) * n * n / 2.0
    )
    return np.where(ax <= n, ax**alpha, outer)


def dphi_n(xi, n: float, alpha: float):
    x = np.asarray(xi, dtype=float)
    if alpha == 2:
        return 2.0 * x
    ax = np.abs(x)
    outer = n ** (alpha - 2) * (alpha * (alpha - 1) * x - alpha * (alpha - 2) * n * np.sign(x))
    return np.where(ax <= n, alpha * np.sign(x) * ax ** (alpha - 1), outer)


def d2phi_n(xi, n: float, alpha: float):
    x = np.asarray(xi, dtype=float)
    if alpha == 2:
        return np.full_like(x, 2.0)
    ax = np.abs(x)
    return np.where(ax <= n, alpha * (alpha - 1) * ax ** (alpha - 2), alpha * (alpha - 1) * n ** (alpha - 2) * np.ones_like(x))


def gauss_defect(u: GridField, G: Callable, alpha: float, n: float) -> float:
    """Discrete ``int phi_n''(u) grad u . G(u) dx`` for a 1D Dirichlet field.

    The continuous integral vanishes by the divergence theorem.
    """
    if u.boundary != "dirichlet" or u.d != 1:
        raise ConfigurationError("gauss_defect needs a 1D Dirichlet field")
    up = np.pad(u.values, 1)
    (grad,), w = _gradient(u.values, u.h, "dirichlet")
    return float(np.sum(w * d2phi_n(up, n, alpha) * grad * G(up)))


def _lalpha_pow(states: np.ndarray, h: float, d: int, alpha: float) -> np.ndarray:
    return h**d * np.sum(np.abs(states) ** alpha, axis=-1)


def sup_moment(states: np.ndarray, h: float, d: int, alpha: float) -> float:
    """``sup_t ||u(t)||_{L^alpha}^alpha`` over stored states ``(M + 1, n)``."""
    return float(np.max(_lalpha_pow(np.reshape(states, (len(states), -1)), h, d, alpha)))


@dataclass
class MomentReport:
    """Monte Carlo estimate of ``(E sup_t ||u(t)||_{L^alpha}^alpha)^(1/alpha)``."""

    alpha: float
    empirical_lhs: float
    u0_scale_sweep: list[tuple[float, float]]
    ratios: list[float]
    standard_errors: list[float]
    n_paths: int
    n_excluded: list[int]
    valid: bool

    @property
    def ratio_spread(self) -> float:
        r = np.asarray(self.ratios)
        return float(r.max() / r.min()) if r.size and r.min() > 0 else math.inf


def moment_verify_many(
    model: ModelSpec,
    u0: GridField,
    alphas: Sequence[float],
    n_paths: int,
    runner: Callable,
    scales: Sequence[float] = (1.0, 2.0, 4.0),
    map_fn: Callable = map,
) -> dict[float, MomentReport]:
    """Moment reports for several ``alpha`` sharing the same simulated paths.

    ``runner(u0, path_index)`` must return ``(path, record)`` where
    ``path.states`` holds the states and ``record.termination`` the outcome;
    it is passed to ``map_fn`` together with the two argument iterables, so a
    picklable runner can be fanned out to worker processes.
    Paths flagged ``blow_up_flag`` are excluded; more than 5% excluded marks
    the report invalid.
    """
    for alpha in alphas:
        if alpha < 2:
            raise ConfigurationError("alpha must be at least 2")
    scales = sorted(float(s) for s in scales)
    h, d = model.h, model.triple.d
    sups = {alpha: [] for alpha in alphas}
    excluded = []
    for s in scales:
        u_s = u0 * s
        runs = list(map_fn(runner, [u_s] * n_paths, range(n_paths)))
        bad = 0
        per_alpha = {alpha: [] for alpha in alphas}
        for path, record in runs:
            if record.termination == "blow_up_flag":
                bad += 1
                continue
            for alpha in alphas:
                per_alpha[alpha].append(sup_moment(path.states, h, d, alpha))
        excluded.append(bad)
        for alpha in alphas:
            sups[alpha].append(np.asarray(per_alpha[alpha]))
    reports = {}
    for alpha in alphas:
        sweep, ratios, errs = [], [], []
        for s, x in zip(scales, sups[alpha]):
            mean = float(x.mean()) if x.size else math.nan
            lhs = mean ** (1.0 / alpha)
            se_x = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
            errs.append(lhs / (alpha * mean) * se_x if mean > 0 else 0.0)
            sweep.append((s, lhs))
            norm0 = (h**d * np.sum(np.abs(u0.values * s) ** alpha)) ** (1.0 / alpha)
            ratios.append(lhs / (1.0 + norm0))
        lhs0 = dict(sweep).get(1.0, sweep[0][1])
        reports[alpha] = MomentReport(
            alpha=float(alpha),
            empirical_lhs=lhs0,
            u0_scale_sweep=sweep,
            ratios=ratios,
            standard_errors=errs,
            n_paths=n_paths,
            n_excluded=excluded,
            valid=all(b <= 0.05 * n_paths for b in excluded),
        )
    return reports


def moment_verify(
    model: ModelSpec,
    u0: GridField,
    alpha: float,
    n_paths: int,
    runner: Callable,
    scales: Sequence[float] = (1.0, 2.0, 4.0),
    map_fn: Callable = map,
) -> MomentReport:
    """Single-``alpha`` form of :func:`moment_verify_many`."""
    return moment_verify_many(model, u0, (alpha,), n_paths, runner, scales, map_fn)[alpha]


def ito_energy_residual(states: np.ndarray, increments: np.ndarray, model: ModelSpec, dt: float, t0: float = 0.0) -> float:
    """Max over time of the discrete ``alpha = 2`` Ito energy residual.

    ``||u_m||^2 - ||u_0||^2 + 2 sum dt <A(u_j) u_j, u_j> - 2 sum <u_j, drift_j> dt
    - 2 sum <u_j, B(u_j) dW_j> - sum_k sum ||B_k(u_j)||^2 dt``, all with left
    endpoints.  ``<A(u) u, u>`` is the discrete ``int a(u)|grad u|^2`` plus the
    shift term; the drift pairing vanishes when there is no lower-order drift.
    """
    U = np.reshape(states, (len(states), -1))
    dW = np.asarray(increments, dtype=float)
    M = U.shape[0] - 1
    if dW.shape[0] < M:
        raise ConfigurationError("not enough noise increments for the path")
    w = model.h**model.triple.d
    energy = w * np.sum(U * U, axis=1)
    budget = np.zeros(M + 1)
    acc = 0.0
    for m in range(M):
        u = U[m]
        t = t0 + m * dt
        ur = model.retract(u)
        dissip = w * float(u @ model.apply_A(u, u))
        lower = w * float(u @ model.drift(t, u, ur))
        mart = w * float(u @ model.noise_term(t, u, dW[m], ur))
        coeffs = model.noise_coeffs(t, u, ur)
        ito = w * float(np.sum(coeffs * coeffs)) * dt
        acc += 2.0 * dt * dissip - 2.0 * dt * lower - 2.0 * mart - ito
        budget[m + 1] = acc
    return float(np.max(np.abs(energy - energy[0] + budget)))


def operator_difference_ratio(model: ModelSpec, z: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """``||(A(z) - A(y)) w||_E / (||z - y||_{E_p} ||w||_{E^1})``."""
    T = model.triple
    num = T.norm_E(model.apply_A(z, w) - model.apply_A(y, w))
    den = T.norm_Ep(z - y) * T.norm_E1(w)
    return num / den if den > 0 else 0.0


def random_smooth_field(triple: SpaceTriple, rng: np.random.Generator, amplitude: float = 1.0, decay: float = 2.0, n_modes: int = 12) -> np.ndarray:
    """Random combination of low eigenmodes with ``k^(-decay)`` weights."""
    _, E = triple.modes(n_modes)
    c = rng.standard_normal(n_modes) * np.arange(1, n_modes + 1, dtype=float) ** (-decay)
    return amplitude * np.tensordot(c, E, axes=1).ravel()


def estimate_C_Q(
    model: ModelSpec,
    n_samples: int = 200,
    seed: int = 0,
    amplitude: float = 2.0,
    n_modes: int = 12,
) -> float:
    """Empirical operator-Lipschitz constant ``C_Q`` over random smooth triples.

    Samples ``z, y, w`` as random low-mode fields and returns the largest
    observed :func:`operator_difference_ratio`.
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_samples):
        amp = amplitude * rng.uniform(0.1, 1.0)
        z = random_smooth_field(model.triple, rng, amp, rng.uniform(1.0, 3.0), n_modes)
        y = random_smooth_field(model.triple, rng, amp, rng.uniform(1.0, 3.0), n_modes)
        w = random_smooth_field(model.triple, rng, 1.0, rng.uniform(1.0, 3.0), n_modes)
        best = max(best, operator_difference_ratio(model, z, y, w))
    return best


def estimate_lipschitz(
    model: ModelSpec,
    n_samples: int = 200,
    seed: int = 0,
    amplitude: float = 2.0,
    n_modes: int = 12,
) -> tuple[float, float]:
    """Empirical Lipschitz constants of the drift and the noise map.

    Returns ``(L_F, L_B)`` as the largest observed ratios
    ``||F(u) - F(v)||_E / ||u - v||_{E^1}`` and
    ``||B(u) - B(v)||_{gamma(l^2, E^{1/2})} / ||u - v||_{E^1}`` over random
    smooth pairs.  Additive parts cancel in the differences.
    """
    from .spaces import noise_norm

    T = model.triple
    rng = np.random.default_rng(seed)
    L_F = L_B = 0.0
    drift_only = model.replace(forcing=None, compensate_shift=False)
    for _ in range(n_samples):
        amp = amplitude * rng.uniform(0.1, 1.0)
        u = random_smooth_field(T, rng, amp, rng.uniform(1.0, 3.0), n_modes)
        v = random_smooth_field(T, rng, amp, rng.uniform(1.0, 3.0), n_modes)
        den = T.norm_E1(u - v)
        if den == 0:
            continue
        dF = drift_only.drift(0.0, u) - drift_only.drift(0.0, v)
        L_F = max(L_F, T.norm_E(dF) / den)
        dB = model.noise_coeffs(0.0, u) - model.noise_coeffs(0.0, v)
        L_B = max(L_B, noise_norm(dB.reshape((-1,) + T.shape), T) / den)
    return L_F, L_B
