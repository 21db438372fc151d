"""Experiment configuration, Monte Carlo orchestration and result files.

A run is described by a JSON document with these sections (every key has a
default, see :data:`DEFAULTS` and :data:`EXPERIMENT_DEFAULTS`):

``experiment``
    one of :data:`EXPERIMENTS`.
``model``
    ``preset`` (``gdiv``, ``hierarchy``, ``ou``, ``nondivergence``) plus any of
    the preset keys: ``diffusivity`` (``bounded``, ``quadratic``, ``constant``,
    ``sin2``), ``kappa``, ``convection`` (``none``, ``sin``, ``quadratic``),
    ``convection_amp``, ``noise`` (``none``, ``sin``, ``linear``),
    ``noise_amplitude``, ``s_B``, ``additive_amp``, ``forcing_amp``, ``u0``
    (``sin``, ``zero``), ``u0_scale``, ``truncation``, ``shift``.
``triple``
    ``p``, ``q``, ``d``, ``N``.
``noise``
    ``seed``, ``K`` (modes), ``dt``, ``T``.
``budget``
    ``C_Q``, ``L_F``, ``L_B`` and ``lam`` (``null`` means estimate), ``margin``
    and the sample sizes of the estimators.
``caps``
    ``field_cap``, ``min_segment_steps``.
``n_paths``, ``output``, ``params``
    path count, output directory, experiment-specific parameters.

Work items are ``(config, path_index)`` pairs; workers rebuild the model from
the resolved config, so only plain data crosses process boundaries, and
results are reduced in path order.
"""

from __future__ import annotations

import copy
import csv
import functools
import io
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .errors import (
    BlowUpSignal,
    ConfigurationError,
    EllipticityError,
    NoContractionError,
    QseeError,
    SmallnessError,
    SolverError,
)
from .localizer import Caps, run_localized, run_truncated_hierarchy
from .models import (
    ModelSpec,
    bounded_diffusivity,
    decay_weights,
    estimate_C_Q,
    estimate_lipschitz,
    ito_energy_residual,
    make_gdiv_model,
    make_nondivergence_model,
    moment_verify_many,
    random_smooth_field,
    sup_moment,
)
from .noise import NoiseSpec, coarsen, sample_path
from .spaces import SpaceTriple, theta_lambda
from .stepper import (
    MRConstants,
    SmallnessBudget,
    assemble_operator,
    choose_lambda,
    estimate_mr_constants,
    picard_solve,
)

__all__ = [
    "EXPERIMENTS",
    "DEFAULTS",
    "EXPERIMENT_DEFAULTS",
    "MODEL_PRESETS",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_SOLVER",
    "EXIT_ACCEPTANCE",
    "ExperimentConfig",
    "DerivedBudget",
    "build_model",
    "derive_budget",
    "ou_study",
    "ito_study",
    "picard_instance",
    "refinement_slope",
    "run",
    "run_config",
    "sweep",
    "worker_count",
    "write_csv",
]

EXPERIMENTS = (
    "localized_run",
    "truncation_hierarchy",
    "moment_verify",
    "ou_convergence",
    "mr_estimate",
    "picard_study",
    "ito_residual",
    "property_suite",
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4

MODEL_PRESETS: dict[str, dict[str, Any]] = {
    "gdiv": dict(
        diffusivity="bounded", kappa=0.02, convection="sin", convection_amp=0.1, noise="sin",
        noise_amplitude=0.1, s_B=1.5, additive_amp=0.0, forcing_amp=0.0, u0="sin", u0_scale=1.0,
        truncation=None, shift=1.0,
    ),
    "hierarchy": dict(
        diffusivity="quadratic", kappa=0.005, convection="quadratic", convection_amp=0.02, noise="linear",
        noise_amplitude=0.2, s_B=1.5, additive_amp=0.0, forcing_amp=25.0, u0="zero", u0_scale=1.0,
        truncation=None, shift=1.0,
    ),
    "ou": dict(
        diffusivity="constant", kappa=0.0, convection="none", convection_amp=0.0, noise="none",
        noise_amplitude=0.0, s_B=0.0, additive_amp=1.0, forcing_amp=0.0, u0="sin", u0_scale=1.0,
        truncation=None, shift=1.0,
    ),
    "nondivergence": dict(
        diffusivity="sin2", kappa=0.25, convection="none", convection_amp=0.0, noise="sin",
        noise_amplitude=0.1, s_B=1.5, additive_amp=0.0, forcing_amp=0.0, u0="sin", u0_scale=1.0,
        truncation=None, shift=1.0,
    ),
}

DEFAULTS: dict[str, Any] = {
    "experiment": "localized_run",
    "model": {"preset": "gdiv"},
    "triple": {"p": 8.0, "q": 4.0, "d": 1, "N": 64},
    "noise": {"seed": 42, "K": 16, "dt": 1e-4, "T": 0.25},
    "budget": {
        "C_Q": None,
        "L_F": None,
        "L_B": None,
        "lam": None,
        "margin": 0.6,
        "estimate_samples": 200,
        "estimate_amplitude": 2.0,
        "estimate_seed": 0,
        "mr_samples": 40,
        "mr_steps": 256,
        "mr_dt": 1e-3,
        "mr_seed": 0,
    },
    "caps": {"field_cap": 1e3, "min_segment_steps": 2},
    "n_paths": 10,
    "output": "qsee_out",
    "params": {},
}

EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "localized_run": {"params": {"series": True}},
    "truncation_hierarchy": {
        "model": {"preset": "hierarchy"},
        "noise": {"seed": 7},
        "budget": {"estimate_amplitude": 4.0},
        "n_paths": 50,
        "params": {"levels": [1.0, 2.0, 4.0]},
    },
    "moment_verify": {
        "model": {"u0_scale": 2.0},
        "noise": {"T": 0.1},
        "n_paths": 200,
        "params": {"alphas": [2.0, 4.0], "scales": [1.0, 2.0, 4.0]},
    },
    "ou_convergence": {
        "model": {"preset": "ou"},
        "noise": {"K": 4, "T": 0.1},
        "n_paths": 1000,
        "params": {"dts": [1e-3, 5e-4, 2.5e-4], "ref_factor": 4},
    },
    "mr_estimate": {"params": {"n_samples": 40, "n_inner": 4}},
    "picard_study": {
        "n_paths": 10,
        "params": {"N": 32, "K": 8, "window": 0.05, "dt": 1e-3, "tol": 1e-10, "max_iter": 60},
    },
    "ito_residual": {
        "noise": {"T": 0.05},
        "n_paths": 20,
        "params": {"dts": [4e-4, 2e-4, 1e-4]},
    },
    "property_suite": {
        "params": {"checks": ["theta", "truncation", "phi", "q_bounds", "ou"], "quick": True},
    },
}

SECTIONS = ("model", "triple", "noise", "budget", "caps", "params")


# configuration -------------------------------------------------------------------------


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            if part not in SECTIONS:
                raise ConfigurationError(f"override {key!r} does not name a config section")
            nxt = node[part] = {}
        node = nxt
    node[parts[-1]] = value


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    """``["model.kappa=0.1", ...]`` to ``{"model.kappa": 0.1}`` (values as JSON when possible)."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = _parse_value(value.strip())
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description."""

    experiment: str
    model: dict
    triple: dict
    noise: dict
    budget: dict
    caps: dict
    n_paths: int
    output: str
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        user = copy.deepcopy(raw)
        for key, value in (overrides or {}).items():
            _set_dotted(user, key, value)
        experiment = user.get("experiment", DEFAULTS["experiment"])
        if experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {experiment!r}")
        cfg = _merge(_merge(DEFAULTS, EXPERIMENT_DEFAULTS[experiment]), user)
        preset = cfg["model"].get("preset", "gdiv")
        if preset not in MODEL_PRESETS:
            raise ConfigurationError(f"unknown model preset {preset!r}")
        cfg["model"] = _merge(MODEL_PRESETS[preset], cfg["model"])
        cfg["model"]["preset"] = preset
        for section in SECTIONS:
            if not isinstance(cfg[section], dict):
                raise ConfigurationError(f"section {section!r} must be an object")
        for section in ("model", "triple", "noise", "budget", "caps"):
            reference = MODEL_PRESETS[preset] if section == "model" else DEFAULTS[section]
            extra = set(cfg[section]) - set(reference) - {"preset"}
            if extra:
                raise ConfigurationError(f"unknown keys in {section!r}: {sorted(extra)}")
        out = cls(**cfg)
        out.validate()
        return out

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Re-resolve with dotted overrides such as ``{"noise.seed": 3}``."""
        return ExperimentConfig.from_dict(self.to_dict(), overrides)

    def validate(self) -> None:
        if not isinstance(self.n_paths, int) or self.n_paths < 1:
            raise ConfigurationError("n_paths must be a positive integer")
        nz = self.noise
        if not nz["dt"] > 0 or not nz["T"] > 0:
            raise ConfigurationError("noise dt and T must be positive")
        if int(nz["K"]) < 1:
            raise ConfigurationError("noise K must be at least 1")
        _steps(nz["T"], nz["dt"])
        if not 0 < self.budget["margin"] < 1:
            raise ConfigurationError("budget margin must lie in (0, 1)")
        Caps(**self.caps)
        # builds the triple and samples ellipticity
        build_model(self)
        if self.experiment in ("ou_convergence", "ito_residual"):
            dts = [float(x) for x in self.params["dts"]]
            if len(dts) < 2:
                raise ConfigurationError("a refinement study needs at least two dt levels")
            finest = min(dts) / int(self.params.get("ref_factor", 1))
            for dt in dts:
                _ratio(dt, finest)
                _steps(nz["T"], dt)
        if self.experiment == "truncation_hierarchy":
            levels = self.params["levels"]
            if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
                raise ConfigurationError("levels must be nonempty and increasing")
        if self.experiment == "moment_verify":
            if any(a < 2 for a in self.params["alphas"]):
                raise ConfigurationError("alpha must be at least 2")
            if not self.params["scales"]:
                raise ConfigurationError("scales must be nonempty")


def _steps(T: float, dt: float) -> int:
    M = int(round(T / dt))
    if M < 1 or abs(M * dt - T) > 1e-9 * max(T, 1.0):
        raise ConfigurationError(f"T = {T} is not a multiple of dt = {dt}")
    return M


def _ratio(dt: float, finest: float) -> int:
    r = int(round(dt / finest))
    if r < 1 or abs(r * finest - dt) > 1e-9 * dt:
        raise ConfigurationError(f"dt = {dt} is not a multiple of the finest step {finest}")
    return r


# model construction --------------------------------------------------------------------


def _diffusivity(name: str, kappa: float) -> tuple[Callable, float]:
    if name == "bounded":
        return bounded_diffusivity(kappa)
    if name == "quadratic":
        if kappa < 0:
            raise ConfigurationError("quadratic diffusivity needs kappa >= 0")
        return (lambda u: 1.0 + kappa * u * u), math.inf
    if name == "constant":
        return (lambda u: np.ones_like(u)), 0.0
    raise ConfigurationError(f"unknown diffusivity {name!r}")


def _profile(name: str, amp: float) -> Callable | None:
    if name == "none" or amp == 0:
        return None
    if name == "sin":
        return lambda u: amp * np.sin(u)
    if name == "quadratic":
        return lambda u: amp * u * u
    if name == "linear":
        return lambda u: amp * u
    raise ConfigurationError(f"unknown profile {name!r}")


def _build(model_json: str, triple_json: str, K: int) -> tuple[ModelSpec, np.ndarray]:
    mc, tc = json.loads(model_json), json.loads(triple_json)
    nondiv = mc["preset"] == "nondivergence" or mc["diffusivity"] == "sin2"
    triple = SpaceTriple(
        p=float(tc["p"]),
        q=float(tc["q"]),
        d=int(tc["d"]),
        N=int(tc["N"]),
        scale="nondivergence_form" if nondiv else "divergence_form",
        boundary="periodic" if nondiv else "dirichlet",
    )
    pts = triple.points()
    additive = decay_weights(K, mc["s_B"], mc["additive_amp"]) if mc["additive_amp"] else None
    g = None if mc["noise"] == "none" or not mc["noise_amplitude"] else _profile(mc["noise"], 1.0)
    forcing = None
    if mc["forcing_amp"]:
        shape = np.prod([np.sin(math.pi * x) for x in pts], axis=0)
        fvals = mc["forcing_amp"] * shape
        forcing = lambda t: fvals  # noqa: E731
    common = dict(
        triple=triple,
        n_modes=K,
        s_B=mc["s_B"],
        noise_amplitude=mc["noise_amplitude"],
        additive=additive,
        forcing=forcing,
        shift=float(mc["shift"]),
        truncation=mc["truncation"],
        name=mc["preset"],
    )
    if nondiv:
        if mc["convection"] != "none":
            raise ConfigurationError("the non-divergence model has no convective flux")
        kappa = float(mc["kappa"])
        if kappa < 0:
            raise ConfigurationError("sin2 diffusivity needs kappa >= 0")
        a_ij = lambda x, u, grad: 1.0 + kappa * np.sin(u) ** 2  # noqa: E731
        model = make_nondivergence_model(a_ij, g, L_a=kappa, **common)
        u0 = np.prod([np.sin(x) for x in pts], axis=0)
    else:
        a, L_a = _diffusivity(mc["diffusivity"], float(mc["kappa"]))
        model = make_gdiv_model(
            a,
            _profile(mc["convection"], mc["convection_amp"]),
            g,
            L_a=L_a,
            constant_a=mc["diffusivity"] == "constant",
            **common,
        )
        u0 = np.prod([np.sin(math.pi * x) for x in pts], axis=0)
    if mc["u0"] == "zero":
        u0 = np.zeros(triple.shape)
    elif mc["u0"] != "sin":
        raise ConfigurationError(f"unknown initial datum {mc['u0']!r}")
    return model, mc["u0_scale"] * np.ravel(u0)


@functools.lru_cache(maxsize=32)
def _build_cached(model_json: str, triple_json: str, K: int) -> tuple[ModelSpec, np.ndarray]:
    return _build(model_json, triple_json, K)


def build_model(cfg: ExperimentConfig) -> tuple[ModelSpec, np.ndarray]:
    """Model and scaled initial datum described by ``cfg``."""
    return _build_cached(
        json.dumps(cfg.model, sort_keys=True), json.dumps(cfg.triple, sort_keys=True), int(cfg.noise["K"])
    )


@dataclass(frozen=True)
class DerivedBudget:
    """Smallness budget and the estimates it was derived from."""

    budget: SmallnessBudget
    mr: MRConstants
    estimated: tuple[str, ...]

    def as_dict(self) -> dict:
        b = self.budget
        return {
            "C_Q": b.C_Q,
            "L_F": b.L_F1,
            "L_B": b.L_B1,
            "lam": b.lam,
            "c_mrd_hat": self.mr.c_mrd_hat,
            "c_mrs_hat": self.mr.c_mrs_hat,
            "mr_samples": self.mr.n_samples,
            "contraction_number": b.contraction_number(self.mr),
            "estimated": list(self.estimated),
        }


def derive_budget(
    model: ModelSpec, u0: np.ndarray, bcfg: dict, K: int, estimate_model: ModelSpec | None = None
) -> DerivedBudget:
    """Fill unset budget constants by Monte Carlo and pick lambda.

    ``C_Q``, ``L_F`` and ``L_B`` are estimated on ``estimate_model`` (defaults
    to ``model``); the MR constants are estimated for the operator frozen at
    ``u0``.  An explicit ``lam`` is validated against the smallness condition.
    """
    est = estimate_model or model
    estimated = []
    n_est, amp, seed = int(bcfg["estimate_samples"]), float(bcfg["estimate_amplitude"]), int(bcfg["estimate_seed"])
    C_Q = bcfg["C_Q"]
    if C_Q is None:
        C_Q = 0.0 if est.constant_a else estimate_C_Q(est, n_est, seed, amp)
        estimated.append("C_Q")
    L_F, L_B = bcfg["L_F"], bcfg["L_B"]
    if L_F is None or L_B is None:
        lf, lb = estimate_lipschitz(est, n_est, seed, amp)
        if L_F is None:
            L_F = lf
            estimated.append("L_F")
        if L_B is None:
            L_B = lb
            estimated.append("L_B")
    op = assemble_operator(model, u0)
    spec = NoiseSpec(int(bcfg["mr_seed"]), K, int(bcfg["mr_steps"]), float(bcfg["mr_dt"]))
    mr = estimate_mr_constants(op, model.triple, spec, int(bcfg["mr_samples"]))
    lam = bcfg["lam"]
    if lam is None:
        lam = choose_lambda(C_Q, L_F, 0.0, L_B, 0.0, mr, float(bcfg["margin"]))
        estimated.append("lam")
    budget = SmallnessBudget(float(C_Q), float(L_F), 0.0, float(L_B), 0.0, float(lam)).validate(mr)
    return DerivedBudget(budget, mr, tuple(estimated))


# process fan-out -------------------------------------------------------------------------


def worker_count(n_items: int) -> int:
    """Pool size: ``QSEE_THREADS`` if set, else the CPU count, capped by the work."""
    env = os.environ.get("QSEE_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigurationError("QSEE_THREADS must be an integer") from exc
        if n < 1:
            raise ConfigurationError("QSEE_THREADS must be at least 1")
    else:
        n = os.cpu_count() or 1
    return max(1, min(n, n_items))


def _pmap(fn: Callable, *iterables) -> list:
    items = [list(it) for it in iterables]
    n = len(items[0]) if items else 0
    workers = worker_count(n)
    if workers <= 1:
        return list(map(fn, *items))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, so the reduction is by path index
        return list(pool.map(fn, *items))


def _cfg_from_json(text: str) -> ExperimentConfig:
    return ExperimentConfig(**json.loads(text))


def _noise_spec(cfg: ExperimentConfig, dt: float | None = None, T: float | None = None) -> NoiseSpec:
    dt = float(cfg.noise["dt"] if dt is None else dt)
    T = float(cfg.noise["T"] if T is None else T)
    return NoiseSpec(int(cfg.noise["seed"]), int(cfg.noise["K"]), _steps(T, dt), dt)


@dataclass(frozen=True)
class _PathRunner:
    """Picklable ``(u0, path_index) -> (path, record)`` for one config."""

    cfg_json: str
    budget: SmallnessBudget

    def __call__(self, u0, path_index: int):
        cfg = _cfg_from_json(self.cfg_json)
        model, _ = build_model(cfg)
        return run_localized(model, u0, self.budget, _noise_spec(cfg), path_index, None, Caps(**cfg.caps))


# output -----------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if x is None:
        return ""
    return str(x)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Header plus rows; floats at 17 significant digits, ``.`` decimal separator."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row length does not match the header")
        w.writerow([_fmt(x) for x in row])
    Path(path).write_text(buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


@dataclass
class _Outcome:
    header: list[str]
    rows: list[list]
    summary: dict
    derived: dict = field(default_factory=dict)
    series: dict[int, tuple[list[str], list[list]]] = field(default_factory=dict)
    extra: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    status: int = EXIT_OK


# shared studies -----------------------------------------------------------------------------


def refinement_slope(dts: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log error`` against ``log dt``."""
    x, y = np.log(np.asarray(dts, float)), np.log(np.asarray(errors, float))
    if not np.all(np.isfinite(y)):
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def ou_study(
    model: ModelSpec,
    u0: np.ndarray,
    dts: Sequence[float],
    T: float,
    n_paths: int,
    seed: int,
    ref_factor: int = 4,
) -> dict:
    """Linear additive-noise ensemble against the OU oracle.

    All levels use the fine increments of the same paths summed in blocks.
    Returns per-level strong errors (RMS discrete ``L^2`` distance at ``T`` to
    the finest reference), per-mode mean/variance errors and their
    standard-error scores at every level, and the fitted strong slope.
    """
    if model.g is not None or model.G is not None or model.F is not None or model.forcing is not None:
        raise ConfigurationError("the OU study needs a linear model with additive noise only")
    if not model.constant_a:
        raise ConfigurationError("the OU study needs constant diffusivity")
    if model.additive is None:
        raise ConfigurationError("the OU study needs additive noise")
    dts = sorted((float(x) for x in dts), reverse=True)
    fine_dt = dts[-1] / ref_factor
    M_fine = _steps(T, fine_dt)
    K = model.n_modes
    spec = NoiseSpec(seed, K, M_fine, fine_dt)
    dW = np.stack([sample_path(spec, i).increments for i in range(n_paths)], axis=1)  # (M, P, K)
    E = model.modes
    w = model.h**model.triple.d
    op = assemble_operator(model, np.zeros(model.n_nodes))
    lam_k = w * np.einsum("kn,kn->k", E, np.stack([op.apply(e) for e in E]))
    u0 = np.ravel(u0)

    def final_state(factor: int) -> np.ndarray:
        dt = fine_dt * factor
        inc = dW.reshape(M_fine // factor, factor, n_paths, K).sum(axis=1)
        U = np.repeat(u0[:, None], n_paths, axis=1)
        b = model.additive
        for m in range(inc.shape[0]):
            U = op.solve(U + E.T @ (b[:, None] * inc[m].T), dt)
        return U

    ref = final_state(1)
    oracle = [_ou_moments(lam_k[k], model.additive[k], T, w * float(E[k] @ u0)) for k in range(K)]
    levels = []
    for dt in dts:
        U = final_state(_ratio(dt, fine_dt))
        strong = math.sqrt(float(np.mean(w * np.sum((U - ref) ** 2, axis=0))))
        coef = w * (E @ U)  # (K, P)
        mean = coef.mean(axis=1)
        var = coef.var(axis=1, ddof=1)
        centred = coef - mean[:, None]
        se_mean = np.sqrt(var / n_paths)
        se_var = np.sqrt(np.var(centred**2, axis=1, ddof=1) / n_paths)
        exact_mean = np.array([o[0] for o in oracle])
        exact_var = np.array([o[1] for o in oracle])
        levels.append(
            {
                "dt": dt,
                "strong_error": strong,
                "weak_mean_error": float(np.max(np.abs(mean - exact_mean))),
                "weak_var_error": float(np.max(np.abs(var - exact_var))),
                "mean": mean,
                "var": var,
                "exact_mean": exact_mean,
                "exact_var": exact_var,
                "z_mean": np.abs(mean - exact_mean) / se_mean,
                "z_var": np.abs(var - exact_var) / se_var,
            }
        )
    slope = refinement_slope([lv["dt"] for lv in levels], [lv["strong_error"] for lv in levels])
    return {"levels": levels, "slope": slope, "eigenvalues": lam_k, "reference_dt": fine_dt}


def _ou_moments(lam: float, b: float, t: float, c0: float) -> tuple[float, float]:
    from .models import ou_oracle

    return ou_oracle(float(lam), float(b), t, c0)


def _ito_path(cfg_json: str, budget: SmallnessBudget, path_index: int, dts: tuple[float, ...]) -> list[float]:
    cfg = _cfg_from_json(cfg_json)
    model, u0 = build_model(cfg)
    T = float(cfg.noise["T"])
    finest = min(dts)
    fine = sample_path(_noise_spec(cfg, finest, T), path_index)
    out = []
    for dt in dts:
        nz = coarsen(fine, _ratio(dt, finest))
        path, rec = run_localized(model, u0, budget, nz, path_index, T, Caps(**cfg.caps))
        if rec.termination != "reached_T":
            out.append(math.nan)
            continue
        out.append(ito_energy_residual(path.states, nz.increments, model, dt))
    return out


def ito_study(cfg: ExperimentConfig, budget: SmallnessBudget) -> dict:
    """Mean max Ito energy residual per dt level over ``cfg.n_paths`` paths."""
    dts = tuple(sorted((float(x) for x in cfg.params["dts"]), reverse=True))
    per_path = _pmap(functools.partial(_ito_path, cfg.to_json(), budget, dts=dts), range(cfg.n_paths))
    R = np.array(per_path, dtype=float)
    mean = np.nanmean(R, axis=0)
    return {"dts": list(dts), "residuals": R, "mean": mean, "slope": refinement_slope(dts, mean)}


def picard_instance(seed: int, N: int = 32, K: int = 8, dt: float = 1e-3, window: float = 0.05, margin: float = 0.6):
    """Random small GDIV instance with a budget validated by :func:`choose_lambda`.

    Returns ``(op, model, u0, noise, lam, mr)``.
    """
    rng = np.random.default_rng([seed, 977])
    kappa, sigma, conv = rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)
    a, L_a = bounded_diffusivity(kappa)
    triple = SpaceTriple(N=N)
    model = make_gdiv_model(
        a, lambda u: conv * np.sin(u), np.sin, noise_amplitude=sigma, n_modes=K, triple=triple, L_a=L_a
    )
    u0 = random_smooth_field(triple, rng, rng.uniform(0.5, 2.0))
    op = assemble_operator(model, u0)
    mr = estimate_mr_constants(op, triple, NoiseSpec(seed, K, 50, dt), 10)
    C_Q = estimate_C_Q(model, 100, seed)
    L_F, L_B = estimate_lipschitz(model, 100, seed)
    lam = choose_lambda(C_Q, L_F, 0.0, L_B, 0.0, mr, margin)
    noise = sample_path(NoiseSpec(seed, K, _steps(window, dt), dt), 0)
    return op, model, u0, noise, lam, mr


def _picard_worker(args) -> dict:
    seed, p = args
    op, model, u0, noise, lam, mr = picard_instance(seed, int(p["N"]), int(p["K"]), float(p["dt"]), float(p["window"]))
    res = picard_solve(op, model, u0, noise, float(p["window"]), float(p["tol"]), int(p["max_iter"]), lam=lam)
    return {"lam": lam, "distances": res.distances, "ratios": res.ratios, "converged": res.converged}


# experiments --------------------------------------------------------------------------------


def _localized_worker(args) -> dict:
    cfg_json, budget, i = args
    cfg = _cfg_from_json(cfg_json)
    model, u0 = build_model(cfg)
    path, rec = run_localized(model, u0, budget, _noise_spec(cfg), i, None, Caps(**cfg.caps))
    out = {"record": rec, "series": None}
    if cfg.params.get("series", False):
        theta = np.append(path.theta, theta_lambda(float(path.monitor[-1]), budget.lam))
        out["series"] = np.column_stack([path.times, path.norm_E, path.norm_Ep, path.norm_E1, theta, path.monitor])
    return out


def _exp_localized(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, int(cfg.noise["K"]))
    runs = _pmap(_localized_worker, [(cfg.to_json(), derived.budget, i) for i in range(cfg.n_paths)])
    rows, series = [], {}
    counts = {"reached_T": 0, "blow_up_flag": 0, "step_floor": 0}
    anchors = []
    for i, run_ in enumerate(runs):
        rec = run_["record"]
        counts[rec.termination] += 1
        anchors.append(len(rec.anchors))
        for j, (tau, _) in enumerate(rec.anchors):
            lp = rec.segment_lp[j] if j < len(rec.segment_lp) else 0.0
            rows.append([i, j, tau, lp, rec.termination])
        if run_["series"] is not None:
            series[i] = (["t", "norm_E", "norm_Ep", "norm_E1", "theta", "monitor"], run_["series"].tolist())
    summary = dict(counts)
    summary.update(
        n_paths=cfg.n_paths,
        total_anchors=int(sum(anchors)),
        mean_anchor_count=float(np.mean(anchors)),
        max_anchor_count=int(max(anchors)),
    )
    return _Outcome(["path", "anchor_index", "tau_n", "monitor_lp", "termination"], rows, summary, derived.as_dict(), series)


def _hierarchy_worker(args) -> list[list]:
    cfg_json, budget, i = args
    cfg = _cfg_from_json(cfg_json)
    model, u0 = build_model(cfg)
    levels = [float(x) for x in cfg.params["levels"]]
    res = run_truncated_hierarchy(model, u0, budget, _noise_spec(cfg), i, None, levels, Caps(**cfg.caps))
    rows = []
    for k, lev in enumerate(res.levels):
        equal = None
        nxt = next((p for p in res.paths[k + 1 :] if p is not None), None)
        path = res.paths[k]
        if path is not None and nxt is not None:
            upto = path.times.size if lev.exit_index is None else lev.exit_index
            upto = min(upto, nxt.states.shape[0])
            equal = bool(np.array_equal(path.states[:upto], nxt.states[:upto]))
        exit_index = -1 if lev.exit_index is None else lev.exit_index
        rows.append([i, k, lev.n, lev.gamma_set_member, lev.sigma_n, lev.termination, exit_index, equal])
    return rows


def _exp_hierarchy(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    levels = [float(x) for x in cfg.params["levels"]]
    derived = derive_budget(model, u0, cfg.budget, int(cfg.noise["K"]), model.with_truncation(max(levels)))
    per_path = _pmap(_hierarchy_worker, [(cfg.to_json(), derived.budget, i) for i in range(cfg.n_paths)])
    rows = [r for block in per_path for r in block]
    violations = mismatches = 0
    for block in per_path:
        sim = [r for r in block if r[3]]
        violations += sum(1 for a, b in zip(sim, sim[1:]) if a[4] > b[4])
        mismatches += sum(1 for r in block if r[7] is False)
    terms = [r[5] for r in rows]
    summary = {
        "n_paths": cfg.n_paths,
        "levels": levels,
        "monotonicity_violations": violations,
        "prefix_mismatches": mismatches,
        "blow_up_flag": terms.count("blow_up_flag"),
        "step_floor": terms.count("step_floor"),
        "mean_sigma": [float(np.mean([r[4] for r in rows if r[1] == k])) for k in range(len(levels))],
    }
    header = ["path", "level_index", "n", "gamma_set_member", "sigma_n", "termination", "exit_index", "prefix_equal"]
    return _Outcome(header, rows, summary, derived.as_dict())


def _exp_moment(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, int(cfg.noise["K"]))
    alphas = [float(a) for a in cfg.params["alphas"]]
    runner = _PathRunner(cfg.to_json(), derived.budget)
    reports = moment_verify_many(model, model.field(u0), alphas, cfg.n_paths, runner, cfg.params["scales"], _pmap)
    rows = []
    summary = {"n_paths": cfg.n_paths, "ratio_spread": {}, "valid": True}
    for alpha, rep in reports.items():
        for (s, lhs), ratio, se, bad in zip(rep.u0_scale_sweep, rep.ratios, rep.standard_errors, rep.n_excluded):
            rows.append([alpha, s, lhs, ratio, se, rep.n_paths, bad])
        summary["ratio_spread"][_fmt(alpha)] = rep.ratio_spread
        summary["valid"] = summary["valid"] and rep.valid
    header = ["alpha", "scale", "empirical_lhs", "ratio", "standard_error", "n_paths", "n_excluded"]
    return _Outcome(header, rows, summary, derived.as_dict())


def _exp_ou(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    p = cfg.params
    res = ou_study(model, u0, p["dts"], float(cfg.noise["T"]), cfg.n_paths, int(cfg.noise["seed"]), int(p["ref_factor"]))
    rows = [[lv["dt"], lv["strong_error"], lv["weak_mean_error"], lv["weak_var_error"]] for lv in res["levels"]]
    mode_rows = []
    for lv in res["levels"]:
        for k in range(len(lv["mean"])):
            mode_rows.append(
                [lv["dt"], k + 1, lv["mean"][k], lv["exact_mean"][k], lv["z_mean"][k], lv["var"][k], lv["exact_var"][k], lv["z_var"][k]]
            )
    finest = res["levels"][-1]
    summary = {
        "slope": res["slope"],
        "reference_dt": res["reference_dt"],
        "max_z_mean": float(np.max(finest["z_mean"])),
        "max_z_var": float(np.max(finest["z_var"])),
        "n_paths": cfg.n_paths,
    }
    extra = {"modes.csv": (["dt", "mode", "mean", "exact_mean", "z_mean", "var", "exact_var", "z_var"], mode_rows)}
    return _Outcome(["dt", "strong_error", "weak_mean_error", "weak_var_error"], rows, summary, {}, extra=extra)


def _exp_mr(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    b = cfg.budget
    op = assemble_operator(model, u0)
    spec = NoiseSpec(int(b["mr_seed"]), int(cfg.noise["K"]), int(b["mr_steps"]), float(b["mr_dt"]))
    mr = estimate_mr_constants(op, model.triple, spec, int(cfg.params["n_samples"]), n_inner=int(cfg.params["n_inner"]))
    det = np.fmax.accumulate(mr.deterministic_ratios)
    sto = np.fmax.accumulate(mr.stochastic_ratios)
    rows = [[i, d, s, dm, sm] for i, (d, s, dm, sm) in enumerate(zip(mr.deterministic_ratios, mr.stochastic_ratios, det, sto))]
    summary = {"c_mrd_hat": mr.c_mrd_hat, "c_mrs_hat": mr.c_mrs_hat, "n_samples": mr.n_samples}
    header = ["sample", "deterministic_ratio", "stochastic_ratio", "c_mrd_hat", "c_mrs_hat"]
    return _Outcome(header, rows, summary)


def _exp_picard(cfg: ExperimentConfig) -> _Outcome:
    seed0 = int(cfg.noise["seed"])
    runs = _pmap(_picard_worker, [(seed0 + i, cfg.params) for i in range(cfg.n_paths)])
    rows = []
    worst = 0.0
    for i, r in enumerate(runs):
        for k, dist in enumerate(r["distances"]):
            ratio = r["ratios"][k - 1] if k >= 1 else None
            rows.append([i, k + 1, dist, ratio, r["lam"]])
        late = r["ratios"][2:]
        worst = max([worst] + list(late))
    summary = {
        "n_instances": cfg.n_paths,
        "converged": int(sum(r["converged"] for r in runs)),
        "max_ratio_past_second": worst,
        "max_ratio": float(max(max(r["ratios"], default=0.0) for r in runs)),
    }
    return _Outcome(["instance", "iteration", "distance", "ratio", "lam"], rows, summary)


def _exp_ito(cfg: ExperimentConfig) -> _Outcome:
    model, u0 = build_model(cfg)
    derived = derive_budget(model, u0, cfg.budget, int(cfg.noise["K"]))
    res = ito_study(cfg, derived.budget)
    rows = [[i, dt, res["residuals"][i, j]] for i in range(cfg.n_paths) for j, dt in enumerate(res["dts"])]
    summary = {"slope": res["slope"], "mean_residual": dict(zip(map(_fmt, res["dts"]), res["mean"])), "n_paths": cfg.n_paths}
    return _Outcome(["path", "dt", "residual"], rows, summary, derived.as_dict())


def _exp_property(cfg: ExperimentConfig) -> _Outcome:
    from . import verify

    quick = bool(cfg.params.get("quick", True))
    rows, failed = [], []
    for name in cfg.params["checks"]:
        if name not in verify.CHECKS:
            raise ConfigurationError(f"unknown check {name!r}")
        result = verify.CHECKS[name](quick=quick, seed=int(cfg.noise["seed"]))
        rows.append([name, result.passed, json.dumps(_jsonable(result.details), sort_keys=True)])
        if not result.passed:
            failed.append(name)
    summary = {"failed": failed, "n_checks": len(rows)}
    return _Outcome(["check", "passed", "details"], rows, summary, status=EXIT_ACCEPTANCE if failed else EXIT_OK)


_RUNNERS = {
    "localized_run": _exp_localized,
    "truncation_hierarchy": _exp_hierarchy,
    "moment_verify": _exp_moment,
    "ou_convergence": _exp_ou,
    "mr_estimate": _exp_mr,
    "picard_study": _exp_picard,
    "ito_residual": _exp_ito,
    "property_suite": _exp_property,
}


# entry points ------------------------------------------------------------------------------------


def _error_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigurationError, EllipticityError, SmallnessError)):
        return EXIT_CONFIG
    if isinstance(exc, (SolverError, NoContractionError, BlowUpSignal, QseeError, FloatingPointError)):
        return EXIT_SOLVER
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return EXIT_CONFIG
    return EXIT_SOLVER


def _report_error(out: Path | None, exc: BaseException, code: int, stream=None) -> dict:
    err = {"status": "error", "exit_code": code, "error_type": type(exc).__name__, "message": str(exc)}
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", err)
        except OSError:
            pass
    print(json.dumps(err, sort_keys=True), file=stream or sys.stderr)
    return err


def run_config(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> int:
    """Execute a resolved config and write its artifacts; returns the exit code."""
    out = Path(out_dir if out_dir is not None else cfg.output)
    try:
        outcome = _RUNNERS[cfg.experiment](cfg)
    except Exception as exc:  # mapped onto exit codes
        code = _error_code(exc)
        _report_error(out, exc, code)
        return code
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", outcome.header, outcome.rows)
    for i, (header, rows) in sorted(outcome.series.items()):
        write_csv(out / f"series_{i}.csv", header, rows)
    for name, (header, rows) in sorted(outcome.extra.items()):
        write_csv(out / name, header, rows)
    manifest = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "code_version": __version__,
        "seed": cfg.noise["seed"],
        "derived": outcome.derived,
        "summary": outcome.summary,
        "exit_code": outcome.status,
        "status": "ok" if outcome.status == EXIT_OK else "acceptance_failure",
    }
    _write_json(out / "manifest.json", manifest)
    return outcome.status


def run(
    config: str | os.PathLike | dict,
    out_dir: str | os.PathLike | None = None,
    seed: int | None = None,
    paths: int | None = None,
    overrides: dict[str, Any] | Sequence[str] | None = None,
) -> int:
    """Load, resolve and execute one experiment.

    ``seed`` and ``paths`` are shorthands for the ``noise.seed`` and
    ``n_paths`` overrides.  Invalid configurations exit with code 2 before
    anything is simulated.
    """
    if overrides is None:
        ov: dict[str, Any] = {}
    elif isinstance(overrides, dict):
        ov = dict(overrides)
    else:
        ov = None
    out = Path(out_dir) if out_dir is not None else None
    try:
        if ov is None:
            ov = parse_overrides(overrides)
        if seed is not None:
            ov["noise.seed"] = int(seed)
        if paths is not None:
            ov["n_paths"] = int(paths)
        if isinstance(config, dict):
            cfg = ExperimentConfig.from_dict(config, ov)
        else:
            cfg = ExperimentConfig.load(config, ov)
    except Exception as exc:
        code = _error_code(exc)
        _report_error(out, exc, code)
        return code
    return run_config(cfg, out)


def _grid_points(grid) -> list[dict[str, Any]]:
    if isinstance(grid, dict):
        if not grid:
            raise ConfigurationError("parameter grid must be nonempty")
        keys = list(grid)
        values = [grid[k] if isinstance(grid[k], list) else [grid[k]] for k in keys]
        if any(not v for v in values):
            raise ConfigurationError("every grid axis needs at least one value")
        return [dict(zip(keys, combo)) for combo in itertools.product(*values)]
    if isinstance(grid, list) and grid and all(isinstance(p, dict) for p in grid):
        return [dict(p) for p in grid]
    raise ConfigurationError("grid must be a nonempty object of value lists or a nonempty list of override objects")


def sweep(
    config: str | os.PathLike | dict,
    grid,
    out_dir: str | os.PathLike,
    seed: int | None = None,
    paths: int | None = None,
    overrides: dict[str, Any] | None = None,
) -> int:
    """Run ``config`` at every grid point in its own ``point_###`` directory.

    ``grid`` is either ``{"key": [v1, v2], ...}`` (cartesian product) or a
    list of override objects; ``{}`` in such a list is the base run.  Failing
    points are recorded in ``summary.csv`` and the sweep continues; the exit
    code is the worst point status.
    """
    out = Path(out_dir)
    try:
        points = _grid_points(grid)
        if not isinstance(config, dict):
            try:
                config = json.loads(Path(config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config: {exc}") from exc
    except Exception as exc:
        code = _error_code(exc)
        _report_error(out, exc, code)
        return code
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for p in points for k in p})
    results = []
    for i, point in enumerate(points):
        ov = dict(overrides or {})
        ov.update(point)
        point_dir = out / f"point_{i:03d}"
        code = run(config, point_dir, seed, paths, ov)
        summary = {}
        mf = point_dir / "manifest.json"
        if mf.exists():
            summary = json.loads(mf.read_text()).get("summary", {})
        results.append((i, point, code, summary))
    scalar_keys = sorted(
        {k for *_, s in results for k, v in s.items() if isinstance(v, (int, float, bool, str)) and not isinstance(v, dict)}
    )
    rows = []
    for i, point, code, summary in results:
        rows.append([i] + [json.dumps(point[k]) if k in point else "" for k in keys] + [code] + [summary.get(k) for k in scalar_keys])
    write_csv(out / "summary.csv", ["point"] + keys + ["exit_code"] + scalar_keys, rows)
    return max(code for _, _, code, _ in results)
