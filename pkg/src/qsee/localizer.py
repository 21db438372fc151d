"""Stopping-time localization, truncation hierarchy and blow-up classification.

A run starts a frozen-coefficient segment at the current anchor, stops it at
the first grid time whose monitor exceeds lambda, and restarts from the
stopped state.  Abnormal ends are encoded in the termination status:

``reached_T``
    the final time was reached;
``blow_up_flag``
    a state exceeded the ``E_p`` field cap or became non-finite;
``step_floor``
    two consecutive segments stopped after fewer than ``min_segment_steps``
    steps, the discrete shadow of losing uniform continuity in ``E_p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .models import ModelSpec
from .noise import NoisePath, NoiseSpec, sample_path
from .spaces import GridField, SpaceTriple
from .stepper import SegmentResult, SmallnessBudget, solve_frozen_segment

__all__ = [
    "TERMINATIONS",
    "Caps",
    "StoppingRecord",
    "LocalizedPath",
    "TruncationLevel",
    "HierarchyResult",
    "run_localized",
    "truncate_Rn",
    "run_truncated_hierarchy",
    "classify_termination",
]

TERMINATIONS = ("reached_T", "blow_up_flag", "step_floor")


@dataclass(frozen=True)
class Caps:
    """Thresholds of the discrete blow-up detector."""

    field_cap: float = 1e3
    min_segment_steps: int = 2

    def __post_init__(self):
        if not self.field_cap > 0:
            raise ConfigurationError("field_cap must be positive")
        if self.min_segment_steps < 1:
            raise ConfigurationError("min_segment_steps must be at least 1")


@dataclass
class StoppingRecord:
    """Anchors ``(tau_n, u(tau_n))`` and the outcome of a localized run."""

    anchors: list[tuple[float, np.ndarray]]
    termination: str
    total_monitor_lp: float
    final_time: float
    segment_steps: list[int] = field(default_factory=list)
    segment_lp: list[float] = field(default_factory=list)

    @property
    def anchor_times(self) -> np.ndarray:
        return np.array([t for t, _ in self.anchors])


@dataclass
class LocalizedPath:
    """States at every grid time of a localized run.

    ``theta[m]`` is the cut-off used for step ``m -> m + 1``; ``monitor[m]``
    is the monitor, after step ``m``, of the segment that produced state
    ``m`` (``segment[m]``).  The norm arrays hold ``E``, ``E_p`` and ``E^1``
    norms of each state.
    """

    times: np.ndarray
    states: np.ndarray
    theta: np.ndarray
    monitor: np.ndarray
    segment: np.ndarray
    norm_E: np.ndarray
    norm_Ep: np.ndarray
    norm_E1: np.ndarray

    def field(self, m: int, model: ModelSpec) -> GridField:
        return model.field(self.states[m])


def _resolve_noise(noise, path_index: int) -> NoisePath:
    if isinstance(noise, NoiseSpec):
        return sample_path(noise, path_index)
    if isinstance(noise, NoisePath):
        return noise
    raise ConfigurationError("noise must be a NoiseSpec or NoisePath")


def run_localized(
    model: ModelSpec,
    u0,
    budget: SmallnessBudget,
    noise: NoiseSpec | NoisePath,
    path_index: int = 0,
    T: float | None = None,
    caps: Caps | None = None,
) -> tuple[LocalizedPath, StoppingRecord]:
    """Glue frozen segments at stopping times until ``T`` or a blow-up flag.

    ``noise`` is either a ``NoiseSpec`` (the path ``path_index`` is sampled) or an
    already sampled path.  The run is a pure function of its arguments.
    """
    caps = caps or Caps()
    path_noise = _resolve_noise(noise, path_index)
    dt = path_noise.dt
    T = path_noise.dt * (path_noise.step_offset + path_noise.n_steps) if T is None else T
    M = int(round(T / dt))
    if M < 1:
        raise ConfigurationError("T must span at least one step")
    u = np.ravel(u0.values if isinstance(u0, GridField) else np.asarray(u0, dtype=float)).astype(float)
    if not np.all(np.isfinite(u)):
        raise ConfigurationError("u0 must be finite")
    triple = model.triple
    norms0 = np.ravel(triple.norms(u, np.array([[triple.s_E], [triple.s_Ep], [triple.s_E1]])))

    states = [u]
    times = [0.0]
    thetas: list[float] = []
    monitor = [0.0]
    segment = [0]
    nE, nEp, nE1 = [norms0[0]], [norms0[1]], [norms0[2]]
    anchors = [(0.0, u.copy())]
    seg_steps: list[int] = []
    seg_lp: list[float] = []
    lp_total = 0.0
    short_run = 0
    m = 0
    termination = "reached_T"
    seg_id = 0
    while m < M:
        seg: SegmentResult = solve_frozen_segment(
            anchors[-1][1], model, budget, path_noise, m * dt, M * dt, triple, field_cap=caps.field_cap
        )
        k = seg.n_steps
        ser = seg.monitor
        states.extend(seg.states[1:])
        times.extend(seg.times[1:])
        thetas.extend(seg.theta_history)
        monitor.extend(ser.monitor)
        segment.extend([seg_id] * k)
        nE.extend(ser.norm_E)
        nEp.extend(ser.norm_Ep)
        nE1.extend(ser.norm_E1)
        lp_seg = float(ser.lp_term[-1]) if k else 0.0
        lp_total = (lp_total**triple.p + lp_seg**triple.p) ** (1.0 / triple.p)
        seg_steps.append(k)
        seg_lp.append(lp_seg)
        m += k
        if seg.blown_up or seg.capped:
            termination = "blow_up_flag"
            break
        if seg.stop_index is None or m >= M:
            break
        short_run = short_run + 1 if k < caps.min_segment_steps else 0
        if short_run >= 2:
            termination = "step_floor"
            break
        seg_id += 1
        anchors.append((m * dt, seg.states[-1].copy()))
    if termination == "reached_T" and m < M:
        termination = "blow_up_flag"
    path = LocalizedPath(
        times=np.array(times),
        states=np.array(states),
        theta=np.array(thetas),
        monitor=np.array(monitor),
        segment=np.array(segment),
        norm_E=np.array(nE),
        norm_Ep=np.array(nEp),
        norm_E1=np.array(nE1),
    )
    record = StoppingRecord(anchors, termination, float(lp_total), float(m * dt), seg_steps, seg_lp)
    return path, record


def truncate_Rn(y, n: float, triple: SpaceTriple):
    """Radial retraction onto the ``E_p`` ball of radius ``n``.

    Inside the ball the input object itself is returned, which keeps coupled
    runs of different truncation levels bit-identical there.
    """
    if not n > 0:
        raise ConfigurationError("n must be positive")
    values = y.values if isinstance(y, GridField) else np.asarray(y, dtype=float)
    norm = triple.norm_Ep(values)
    if norm <= n:
        return y
    out = (n / norm) * values
    return y.like(out) if isinstance(y, GridField) else out


@dataclass
class TruncationLevel:
    """Outcome of the run at truncation level ``n``."""

    n: float
    gamma_set_member: bool
    sigma_n: float
    termination: str
    exit_index: int | None = None


@dataclass
class HierarchyResult:
    """Stitched path and per-level data of a truncation hierarchy run."""

    times: np.ndarray
    states: np.ndarray
    levels: list[TruncationLevel]
    paths: list[LocalizedPath | None]
    records: list[StoppingRecord | None]
    level_of_time: np.ndarray


def run_truncated_hierarchy(
    model: ModelSpec,
    u0,
    budgets: SmallnessBudget | list[SmallnessBudget],
    noise: NoiseSpec | NoisePath,
    path_index: int = 0,
    T: float | None = None,
    levels: list[float] | None = None,
    caps: Caps | None = None,
) -> HierarchyResult:
    """Run the ``R_n``-truncated model for every level on the same noise.

    ``sigma_n`` is the first grid time at which ``||u_n||_{E_p} > n``, or the
    end of the run.  Levels whose ball does not contain ``u0`` with room to
    spare (``||u0||_{E_p} > n / 2``) are recorded but not simulated.  The
    stitched path uses ``u_n`` on ``[0, sigma_n)`` for the smallest simulated
    level whose ``sigma_n`` exceeds each time.
    """
    if not levels:
        raise ConfigurationError("levels must be nonempty")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigurationError("levels must be increasing")
    if isinstance(budgets, SmallnessBudget):
        budgets = [budgets] * len(levels)
    if len(budgets) != len(levels):
        raise ConfigurationError("one budget per level is required")
    path_noise = _resolve_noise(noise, path_index)
    triple = model.triple
    u0v = np.ravel(u0.values if isinstance(u0, GridField) else np.asarray(u0, dtype=float))
    norm0 = triple.norm_Ep(u0v)
    if not any(norm0 <= n / 2 for n in levels):
        raise ConfigurationError("u0 lies outside every level's admissible set")
    out_levels, paths, records = [], [], []
    for n, budget in zip(levels, budgets):
        member = bool(norm0 <= n / 2)
        if not member:
            out_levels.append(TruncationLevel(float(n), False, 0.0, "not_admissible"))
            paths.append(None)
            records.append(None)
            continue
        path, rec = run_localized(model.with_truncation(float(n)), u0v, budget, path_noise, path_index, T, caps)
        above = np.nonzero(path.norm_Ep > n)[0]
        exit_index = int(above[0]) if above.size else None
        sigma = float(path.times[exit_index]) if exit_index is not None else rec.final_time
        out_levels.append(TruncationLevel(float(n), True, sigma, rec.termination, exit_index))
        paths.append(path)
        records.append(rec)
    ref = next(p for p in reversed(paths) if p is not None)
    times = ref.times
    states = np.array(ref.states, copy=True)
    level_of_time = np.full(times.size, len(levels) - 1)
    for idx in reversed(range(len(levels))):
        path, lev = paths[idx], out_levels[idx]
        if path is None:
            continue
        upto = min(path.times.size if lev.exit_index is None else lev.exit_index, times.size)
        states[:upto] = path.states[:upto]
        level_of_time[:upto] = idx
    return HierarchyResult(times, states, out_levels, paths, records, level_of_time)


def classify_termination(record: StoppingRecord) -> dict:
    """Summarize a run.

    Under global existence (the globally Lipschitz Dirichlet model), the
    frequencies of ``blow_up_flag`` and ``step_floor`` should vanish as the
    discretization is refined; a nonzero count is a discrete warning, not a
    proof of blow-up.
    """
    if record.termination not in TERMINATIONS:
        raise ConfigurationError(f"unknown termination {record.termination!r}")
    return {
        "status": record.termination,
        "report": "global" if record.termination == "reached_T" else record.termination,
        "final_time": record.final_time,
        "anchor_count": len(record.anchors),
        "total_monitor_lp": record.total_monitor_lp,
    }
