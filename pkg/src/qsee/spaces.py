"""Discrete function spaces, the cut-off function and the stopping monitor.

States live on uniform grids.  Dirichlet problems are posed on ``(0, 1)^d``
and store interior nodes only, so the boundary value zero is implicit.
Periodic problems are posed on the torus ``[0, 2*pi)^d``.

Fractional norms use a Littlewood-Paley surrogate built from the spectrum of
the reference operator ``I - Laplacian_h``: eigenmodes are grouped into dyadic
blocks ``lambda in [4^j, 4^(j+1))``, each block is reconstructed on the grid,
and the block ``L^q`` norms are combined with weights ``2^(j s)`` in an
``l^p`` sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, NonFiniteFieldError

__all__ = [
    "BOUNDARIES",
    "SCALES",
    "GridField",
    "SpaceTriple",
    "MonitorSeries",
    "grid_points",
    "lq_norm",
    "sobolev1_norm",
    "fractional_norm",
    "noise_norm",
    "theta_lambda",
    "monitor_update",
    "MonitorAccumulator",
]

BOUNDARIES = ("dirichlet", "periodic")
SCALES = ("divergence_form", "nondivergence_form")

# Above this many stored nodes the dense block projector is not built and
# block norms go through batched transforms instead.
DENSE_PROJECTOR_MAX_NODES = 300


def _mesh_width(N: int, boundary: str) -> float:
    return 1.0 / N if boundary == "dirichlet" else 2.0 * math.pi / N


def _axis_points(N: int, boundary: str) -> np.ndarray:
    if boundary == "dirichlet":
        return np.arange(1, N) / N
    return 2.0 * math.pi * np.arange(N) / N


def grid_points(N: int, d: int = 1, boundary: str = "dirichlet") -> tuple[np.ndarray, ...]:
    """Coordinates of the stored nodes, one array per axis in ``ij`` layout."""
    if boundary not in BOUNDARIES:
        raise ConfigurationError(f"unknown boundary {boundary!r}")
    x = _axis_points(N, boundary)
    if d == 1:
        return (x,)
    if d == 2:
        return tuple(np.meshgrid(x, x, indexing="ij"))
    raise ConfigurationError("only d = 1 and d = 2 are supported")


@dataclass(frozen=True, eq=False)
class GridField:
    """One spatial state on a uniform grid.

    Parameters
    ----------
    values : ndarray
        Nodal values, shape ``(n,)`` or ``(n, n)``.  Dirichlet fields hold the
        interior nodes only.
    h : float
        Mesh width.
    boundary : {"dirichlet", "periodic"}
    blown_up : bool
        Set when the field is allowed to carry non-finite entries, e.g. the
        last output of a diverging step.
    """

    values: np.ndarray
    h: float
    boundary: str = "dirichlet"
    blown_up: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim not in (1, 2):
            raise ConfigurationError("GridField values must be 1D or 2D")
        if not self.h > 0:
            raise ConfigurationError("mesh width must be positive")
        if self.boundary not in BOUNDARIES:
            raise ConfigurationError(f"unknown boundary {self.boundary!r}")
        if not self.blown_up and not np.all(np.isfinite(values)):
            raise NonFiniteFieldError()

    @classmethod
    def from_function(cls, func: Callable, N: int, d: int = 1, boundary: str = "dirichlet") -> "GridField":
        """Sample ``func`` at the stored nodes of an ``N``-interval grid."""
        pts = grid_points(N, d, boundary)
        return cls(np.broadcast_to(func(*pts), pts[0].shape), _mesh_width(N, boundary), boundary)

    @classmethod
    def zeros(cls, N: int, d: int = 1, boundary: str = "dirichlet") -> "GridField":
        n = N - 1 if boundary == "dirichlet" else N
        return cls(np.zeros((n,) * d), _mesh_width(N, boundary), boundary)

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def N(self) -> int:
        n = self.values.shape[0]
        return n + 1 if self.boundary == "dirichlet" else n

    def like(self, values) -> "GridField":
        """A field on the same grid with new values."""
        return GridField(np.reshape(values, self.values.shape), self.h, self.boundary)

    def _check(self, other: "GridField"):
        if other.values.shape != self.values.shape or other.boundary != self.boundary:
            raise ConfigurationError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, GridField):
            self._check(other)
            return self.like(self.values + other.values)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, GridField):
            self._check(other)
            return self.like(self.values - other.values)
        return NotImplemented

    def __mul__(self, c):
        if np.isscalar(c):
            return self.like(c * self.values)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)


def _finite(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteFieldError()
    return values


def _abs_pow(a: np.ndarray, q: float) -> np.ndarray:
    """``|a|^q`` with cheap paths for the common even exponents."""
    if q == 2.0:
        return a * a
    if q == 4.0:
        a2 = a * a
        return a2 * a2
    return np.abs(a) ** q


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, GridField) else np.asarray(f, dtype=float)


def lq_norm(f: GridField, q: float) -> float:
    """Grid quadrature ``(h^d sum |f|^q)^(1/q)``; ``q = inf`` gives the max norm."""
    if not q >= 1:
        raise ConfigurationError("q must be at least 1")
    v = _finite(f.values)
    if v.size == 0:
        return 0.0
    a = np.abs(v)
    if math.isinf(q):
        return float(a.max())
    scale = a.max()
    if scale == 0.0:
        return 0.0
    return float(scale * (f.h ** f.d * np.sum((a / scale) ** q)) ** (1.0 / q))


def _gradient(values: np.ndarray, h: float, boundary: str) -> tuple[list[np.ndarray], np.ndarray]:
    """Centered-difference gradient components and their quadrature weights.

    Dirichlet fields are padded with the implicit zero boundary; the gradient
    is then one-sided at the boundary nodes and integrated with trapezoid end
    weights.  Periodic fields wrap around.
    """
    d = values.ndim
    if boundary == "dirichlet":
        padded = np.pad(values, 1)
        comps = [np.gradient(padded, h, axis=ax, edge_order=1) for ax in range(d)]
        w1 = np.full(padded.shape[0], h)
        w1[[0, -1]] = 0.5 * h
        weights = w1 if d == 1 else np.multiply.outer(w1, w1)
        return comps, weights
    comps = [(np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2.0 * h) for ax in range(d)]
    return comps, np.full(values.shape, h ** d)


def _weighted_lq(a: np.ndarray, weights: np.ndarray, q: float) -> float:
    scale = a.max() if a.size else 0.0
    if scale == 0.0:
        return 0.0
    if math.isinf(q):
        return float(scale)
    return float(scale * np.sum(weights * (a / scale) ** q) ** (1.0 / q))


def sobolev1_norm(f: GridField, q: float) -> float:
    """``||grad f||_q + ||f||_q`` with centered differences.

    A periodic field that does not wrap continuously (a linear ramp, say)
    produces a large gradient at the seam; no error is raised.
    """
    _finite(f.values)
    comps, weights = _gradient(f.values, f.h, f.boundary)
    grad = np.sqrt(sum(c * c for c in comps))
    return _weighted_lq(grad, weights, q) + lq_norm(f, q)


@dataclass(frozen=True, eq=False)
class SpaceTriple:
    """Norm provider for the scale ``E, E^{1/2}, E_p, E^1`` on one grid.

    ``divergence_form`` realizes ``W^{-1,q}, L^q, B^{1-2/p}_{q,p}, W^{1,q}_0``;
    ``nondivergence_form`` realizes ``L^q, W^{1,q}, B^{2-2/p}_{q,p}, W^{2,q}``.
    The reference operator is ``I - Laplacian_h`` with Dirichlet or periodic
    boundary conditions, so every eigenvalue is at least one.
    """

    p: float = 8.0
    q: float = 4.0
    d: int = 1
    scale: str = "divergence_form"
    N: int = 64
    boundary: str = "dirichlet"
    eigenvalues: np.ndarray = field(init=False, repr=False)
    blocks: np.ndarray = field(init=False, repr=False)
    n_blocks: int = field(init=False, repr=False)
    _projector: np.ndarray | None = field(init=False, repr=False)
    _offsets: np.ndarray = field(init=False, repr=False)
    _safe_max: float = field(init=False, repr=False)
    _monitor_weights: np.ndarray = field(init=False, repr=False)
    _safe_min: float = field(init=False, repr=False)

    def __post_init__(self):
        if not self.p > 2 or not self.q > 2:
            raise ConfigurationError("p and q must exceed 2")
        if self.d not in (1, 2):
            raise ConfigurationError("d must be 1 or 2")
        if self.scale not in SCALES:
            raise ConfigurationError(f"unknown scale {self.scale!r}")
        if self.boundary not in BOUNDARIES:
            raise ConfigurationError(f"unknown boundary {self.boundary!r}")
        if not 1.0 - 2.0 / self.p > self.d / self.q:
            raise ConfigurationError("need 1 - 2/p > d/q")
        if self.N < 3:
            raise ConfigurationError("need at least 3 grid intervals")
        lam = self._coefficient_eigenvalues()
        blocks = np.floor(np.log(lam) / math.log(4.0) + 1e-12).astype(int)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "n_blocks", int(blocks.max()) + 1)
        proj = self._build_projector() if self.n_nodes <= DENSE_PROJECTOR_MAX_NODES else None
        object.__setattr__(self, "_projector", proj)
        object.__setattr__(self, "_offsets", np.arange(self.n_blocks) * self.n_nodes)
        j = np.arange(self.n_blocks)
        weights = np.stack([2.0 ** (j * s) for s in (self.s_Ep, self.s_E, self.s_Ep, self.s_E1)])
        object.__setattr__(self, "_monitor_weights", weights)
        # entry range in which |block value|^q neither overflows nor underflows
        object.__setattr__(self, "_safe_max", 1e280 ** (1.0 / self.q) / self.n_nodes)
        object.__setattr__(self, "_safe_min", 1e-280 ** (1.0 / self.q))

    # grid ------------------------------------------------------------------
    @property
    def h(self) -> float:
        return _mesh_width(self.N, self.boundary)

    @property
    def shape(self) -> tuple[int, ...]:
        n = self.N - 1 if self.boundary == "dirichlet" else self.N
        return (n,) * self.d

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> tuple[np.ndarray, ...]:
        return grid_points(self.N, self.d, self.boundary)

    def field(self, values) -> GridField:
        return GridField(np.reshape(values, self.shape), self.h, self.boundary)

    def zeros(self) -> GridField:
        return self.field(np.zeros(self.shape))

    # smoothness orders -------------------------------------------------------
    @property
    def s_E(self) -> float:
        return -1.0 if self.scale == "divergence_form" else 0.0

    @property
    def s_half(self) -> float:
        return self.s_E + 1.0

    @property
    def s_Ep(self) -> float:
        return self.s_E + 2.0 - 2.0 / self.p

    @property
    def s_E1(self) -> float:
        return self.s_E + 2.0

    # spectrum ----------------------------------------------------------------
    def _axis_mu(self, rfft_axis: bool = False) -> np.ndarray:
        N, h = self.N, self.h
        if self.boundary == "dirichlet":
            k = np.arange(1, N)
            return 4.0 / h**2 * np.sin(k * math.pi * h / 2.0) ** 2
        k = np.arange(N // 2 + 1) if rfft_axis else np.rint(sfft.fftfreq(N) * N)
        return 4.0 / h**2 * np.sin(k * h / 2.0) ** 2

    def _coefficient_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``I - Laplacian_h`` laid out like the transform output."""
        mus = [self._axis_mu(rfft_axis=(self.boundary == "periodic" and ax == self.d - 1)) for ax in range(self.d)]
        lam = np.ones([m.size for m in mus])
        for ax, m in enumerate(mus):
            shape = [1] * self.d
            shape[ax] = m.size
            lam = lam + m.reshape(shape)
        return lam

    def _forward(self, v: np.ndarray) -> np.ndarray:
        axes = tuple(range(v.ndim - self.d, v.ndim))
        if self.boundary == "dirichlet":
            return sfft.dstn(v, type=1, axes=axes)
        return sfft.rfftn(v, axes=axes)

    def _inverse(self, c: np.ndarray) -> np.ndarray:
        axes = tuple(range(c.ndim - self.d, c.ndim))
        if self.boundary == "dirichlet":
            return sfft.idstn(c, type=1, axes=axes)
        return sfft.irfftn(c, s=self.shape, axes=axes)

    def _build_projector(self) -> np.ndarray:
        n = self.n_nodes
        eye = np.eye(n).reshape((n,) + self.shape)
        coeffs = self._forward(eye)
        mats = []
        for j in range(self.n_blocks):
            mask = self.blocks == j
            mats.append(self._inverse(coeffs * mask).reshape(n, n).T)
        return np.concatenate(mats, axis=0)

    def block_components(self, values: np.ndarray) -> np.ndarray:
        """Dyadic pieces ``Delta_j f`` for a batch of fields.

        ``values`` has shape ``(B,) + shape`` or ``shape``; the result has
        shape ``(B, n_blocks, n_nodes)``.
        """
        v = np.asarray(values, dtype=float)
        v = v.reshape((-1, self.n_nodes))
        if self._projector is not None:
            out = (self._projector @ v.T).reshape(self.n_blocks, self.n_nodes, -1)
            return np.moveaxis(out, -1, 0)
        coeffs = self._forward(v.reshape((-1,) + self.shape))
        pieces = [self._inverse(coeffs * (self.blocks == j)).reshape(v.shape[0], -1) for j in range(self.n_blocks)]
        return np.stack(pieces, axis=1)

    def block_norms(self, values: np.ndarray) -> np.ndarray:
        """``L^q`` norms of the dyadic pieces, shape ``(B, n_blocks)``."""
        v = np.asarray(values, dtype=float).reshape((-1, self.n_nodes))
        vmax = float(np.max(np.abs(v))) if v.size else 0.0
        if not math.isfinite(vmax):
            raise NonFiniteFieldError()
        if self._projector is not None and self._safe_min < vmax < self._safe_max:
            comps = v @ self._projector.T
            sums = np.add.reduceat(_abs_pow(comps, self.q), self._offsets, axis=1)
            return (self.h**self.d * sums) ** (1.0 / self.q)
        comps = np.abs(self.block_components(v))
        scale = comps.max(axis=2, keepdims=True)
        safe = np.where(scale > 0, scale, 1.0)
        sums = np.sum((comps / safe) ** self.q, axis=2)
        return scale[..., 0] * (self.h**self.d * sums) ** (1.0 / self.q)

    def combine(self, block_norms: np.ndarray, s: float, outer_p: float) -> np.ndarray:
        """Weighted ``l^outer_p`` sum of block norms along the last axis."""
        weights = 2.0 ** (np.arange(self.n_blocks) * s)
        terms = block_norms * weights
        scale = terms.max(axis=-1)
        if math.isinf(outer_p):
            return scale
        safe = np.where(scale > 0, scale, 1.0)
        return scale * np.sum((terms / safe[..., None]) ** outer_p, axis=-1) ** (1.0 / outer_p)

    def norms(self, values: np.ndarray, s: float, outer_p: float | None = None) -> np.ndarray:
        """Batched :func:`fractional_norm` for an array of states."""
        return self.combine(self.block_norms(values), s, self.p if outer_p is None else outer_p)

    def norm_E(self, f) -> float:
        return float(self.norms(_values(f), self.s_E)[0])

    def norm_Ep(self, f) -> float:
        return float(self.norms(_values(f), self.s_Ep)[0])

    def norm_E1(self, f) -> float:
        return float(self.norms(_values(f), self.s_E1)[0])

    def norm_half(self, f) -> float:
        """``E^{1/2}`` norm: ``L^q`` in divergence form, ``W^{1,q}`` otherwise."""
        g = f if isinstance(f, GridField) else self.field(f)
        return lq_norm(g, self.q) if self.scale == "divergence_form" else sobolev1_norm(g, self.q)

    # eigenfunctions ------------------------------------------------------------
    def modes(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """First ``K`` real eigenfunctions of the reference operator.

        Returns ``(eigenvalues, modes)`` with ``modes`` of shape
        ``(K,) + shape``, each normalized in the discrete ``L^2`` norm and
        sorted by ascending eigenvalue.
        """
        N, h = self.N, self.h
        x = _axis_points(N, self.boundary)
        if self.boundary == "dirichlet":
            k = np.arange(1, N)
            mu = 4.0 / h**2 * np.sin(k * math.pi * h / 2.0) ** 2
            funcs = [lambda kk=kk: np.sin(kk * math.pi * x) for kk in k]
        else:
            mu_list, funcs = [0.0], [lambda: np.ones_like(x)]
            for kk in range(1, N // 2 + 1):
                m = 4.0 / h**2 * math.sin(kk * h / 2.0) ** 2
                mu_list.append(m)
                funcs.append(lambda kk=kk: np.cos(kk * x))
                if 2 * kk < N:
                    mu_list.append(m)
                    funcs.append(lambda kk=kk: np.sin(kk * x))
            mu = np.array(mu_list)
        if self.d == 1:
            lam = 1.0 + mu
            order = np.argsort(lam, kind="stable")[:K]
            vecs = [funcs[i]() for i in order]
        else:
            lam2 = 1.0 + mu[:, None] + mu[None, :]
            order = np.argsort(lam2, axis=None, kind="stable")[:K]
            pairs = [np.unravel_index(i, lam2.shape) for i in order]
            lam = lam2.ravel()
            vecs = [np.multiply.outer(funcs[i](), funcs[j]()) for i, j in pairs]
        if len(order) < K:
            raise ConfigurationError(f"grid supports only {len(order)} modes, {K} requested")
        E = np.array(vecs, dtype=float)
        E /= np.sqrt(h**self.d * np.sum(E.reshape(K, -1) ** 2, axis=1)).reshape((K,) + (1,) * self.d)
        return np.asarray(lam[order], dtype=float), E


def fractional_norm(f: GridField, s: float, triple: SpaceTriple, outer_p: float) -> float:
    """Dyadic-block surrogate of the ``B^s_{q,outer_p}`` norm.

    ``(sum_j (2^(j s) ||Delta_j f||_q)^outer_p)^(1/outer_p)`` with blocks of
    the reference spectrum ``[4^j, 4^(j+1))``.  Negative ``s`` serves the
    ``W^{-1,q}`` norm.
    """
    if not -1.0 <= s <= 2.0:
        raise ConfigurationError("s must lie in [-1, 2]")
    if triple.n_blocks == 0:
        raise ConfigurationError("empty eigenbasis")
    v = _values(f)
    if v.shape != triple.shape:
        raise ConfigurationError("field does not match the triple's grid")
    return float(triple.norms(v, s, outer_p)[0])


def noise_norm(coeffs: np.ndarray, triple: SpaceTriple) -> float:
    """Norm of a family of noise coefficients ``g_k`` in ``gamma(l^2, E^{1/2})``.

    For ``E^{1/2} = L^q`` this is ``||(sum_k g_k^2)^(1/2)||_q``; for
    ``W^{1,q}`` the gradient square function is added.
    """
    g = np.asarray(coeffs, dtype=float)
    _finite(g)
    h, d = triple.h, triple.d
    sq = np.sqrt(np.sum(g * g, axis=0))
    total = _weighted_lq(sq, np.full(sq.shape, h**d), triple.q)
    if triple.scale == "nondivergence_form":
        acc = None
        weights = None
        for gk in g:
            comps, weights = _gradient(gk, h, triple.boundary)
            sq_k = sum(c * c for c in comps)
            acc = sq_k if acc is None else acc + sq_k
        total += _weighted_lq(np.sqrt(acc), weights, triple.q)
    return total


def theta_lambda(x, lam: float):
    """Cut-off ``theta_lambda(x) = Phi(x / lambda)``.

    ``Phi`` equals one on ``[0, 1]``, ``2 - t`` on ``[1, 2]`` and zero beyond,
    so ``theta_lambda`` is ``1/lambda``-Lipschitz.  Accepts scalars or arrays.
    """
    if not lam > 0:
        raise ConfigurationError("lambda must be positive")
    if isinstance(x, (float, int)):
        if not x >= 0:
            raise ValueError("theta_lambda needs x >= 0")
        return min(1.0, max(0.0, 2.0 - x / lam))
    xa = np.asarray(x, dtype=float)
    if np.any(np.isnan(xa)) or np.any(xa < 0):
        raise ValueError("theta_lambda needs x >= 0")
    out = np.clip(2.0 - xa / lam, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MonitorSeries:
    """Running pieces of the stopping monitor for one segment.

    ``sup_term`` is the running max of ``||u - u_anchor||_{E_p}`` and
    ``lp_term`` the left-endpoint quadrature of ``||u||_{L^p(E^1)}``.  The
    ``norm_*`` arrays record the norms of each new state for diagnostics.
    """

    t0: float = 0.0
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sup_term: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lp_term: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_E: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_Ep: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_E1: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def monitor(self) -> np.ndarray:
        return self.sup_term + self.lp_term

    @property
    def value(self) -> float:
        """Current monitor value; zero before the first update."""
        return float(self.sup_term[-1] + self.lp_term[-1]) if self.times.size else 0.0

    def __len__(self) -> int:
        return int(self.times.size)


def _lp_accumulate(lp: float, dt: float, norm: float, p: float) -> float:
    m = max(lp, norm)
    if m == 0.0:
        return 0.0
    return m * ((lp / m) ** p + dt * (norm / m) ** p) ** (1.0 / p)


def _monitor_terms(triple: SpaceTriple, new: np.ndarray, anchor: np.ndarray) -> tuple[float, float, float, float]:
    """``||new - anchor||_{E_p}`` and the ``E``, ``E_p``, ``E^1`` norms of ``new``."""
    blocks = triple.block_norms(np.stack([np.ravel(new) - np.ravel(anchor), np.ravel(new)]))
    terms = blocks[[0, 1, 1, 1]] * triple._monitor_weights
    top = terms.max(axis=1)
    safe = np.where(top > 0, top, 1.0)
    vals = top * np.sum((terms / safe[:, None]) ** triple.p, axis=1) ** (1.0 / triple.p)
    return float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3])


def monitor_update(
    series: MonitorSeries,
    u_new: GridField,
    u_anchor: GridField,
    dt: float,
    triple: SpaceTriple,
) -> MonitorSeries:
    """Extend the monitor by one step ending at ``u_new``.

    Returns a new series; the input is left untouched.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    dist_ep, n_E, n_Ep, n_E1 = _monitor_terms(triple, _values(u_new), _values(u_anchor))
    sup_prev = float(series.sup_term[-1]) if len(series) else 0.0
    lp_prev = float(series.lp_term[-1]) if len(series) else 0.0
    t_prev = float(series.times[-1]) if len(series) else series.t0
    return MonitorSeries(
        t0=series.t0,
        times=np.append(series.times, t_prev + dt),
        sup_term=np.append(series.sup_term, max(sup_prev, dist_ep)),
        lp_term=np.append(series.lp_term, _lp_accumulate(lp_prev, dt, n_E1, triple.p)),
        norm_E=np.append(series.norm_E, n_E),
        norm_Ep=np.append(series.norm_Ep, n_Ep),
        norm_E1=np.append(series.norm_E1, n_E1),
    )


class MonitorAccumulator:
    """Mutable companion of :func:`monitor_update` for stepping loops.

    Produces exactly the same numbers as repeated :func:`monitor_update`
    calls, without copying the history at every step.
    """

    def __init__(self, triple: SpaceTriple, anchor: np.ndarray, t0: float, dt: float):
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        self.triple, self.anchor, self.t0, self.dt = triple, np.ravel(anchor), t0, dt
        self._rows: list[tuple[float, float, float, float, float, float]] = []
        self.sup = 0.0
        self.lp = 0.0
        self.t = t0

    @property
    def value(self) -> float:
        return self.sup + self.lp if self._rows else 0.0

    @property
    def last_Ep(self) -> float:
        return self._rows[-1][4] if self._rows else 0.0

    def update(self, u_new: np.ndarray) -> float:
        dist_ep, n_E, n_Ep, n_E1 = _monitor_terms(self.triple, u_new, self.anchor)
        self.sup = max(self.sup, dist_ep)
        self.lp = _lp_accumulate(self.lp, self.dt, n_E1, self.triple.p)
        self.t = self.t + self.dt
        self._rows.append((self.t, self.sup, self.lp, n_E, n_Ep, n_E1))
        return self.sup + self.lp

    def series(self) -> MonitorSeries:
        rows = np.array(self._rows, dtype=float).reshape(-1, 6)
        return MonitorSeries(self.t0, *(rows[:, i].copy() for i in range(6)))
