"""Singlet preparation by alternating collective projections and conditional
subensemble rotations.

One round is a repeat-until-success sequence in the z basis followed by one
in the x basis.  Within a sequence, the collective magnetization is measured;
an outcome with |m| above the exit threshold triggers a rotation of half the
spins about the conjugate axis (y after z-basis outcomes, z after x-basis
outcomes) with an angle chosen to favor transfer into m = 0, and the
measurement repeats.  Alternating the two bases makes the zero-total-spin
sector the unique fixed point, so every trajectory settles there.

Convergence bookkeeping distinguishes detection from stopping: a trajectory
counts as converged once `convergence_streak` consecutive outcomes satisfy
|m| <= m_cut (this sets rounds-to-converge), but keeps projecting until the
streak reaches `settle_streak`.  Each alternating projection multiplies the
residual weight outside the selected sector by about 1/4, so the default
settle streak of 16 leaves a relative residual below ~4e-9, while stopping
at detection would leave ~1e-4..1e-3.

States evolve through a factor representation: a (dim, r) array K with
rho = K K^dagger, where pure states are the r = 1 column and mixed states
carry one column per nonzero eigenbranch.  Projections are row masks,
rotations are per-site tensor contractions, so mixed evolution costs the
same as r pure branches.  x-basis sequences run entirely inside the rotated
frame; the conjugate-axis rotation U^z(theta) becomes a rotation about x by
-theta there.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

from . import hilbert
from .hilbert import (
    DensityOperator,
    EnsembleShape,
    PureState,
    State,
    SubensembleMask,
    apply_site_unitary,
    enter_frame,
    factor_block_weights,
    leave_frame,
)
from .multiplets import SingletBasis, fidelities, multiplet_counts, singlet_basis
from .sampler import OutcomeDistribution, RandomStream, make_sampler


class SequenceLimitError(RuntimeError):
    """A repeat-until-success sequence exceeded its step cap."""

    def __init__(self, events, factor=None):
        super().__init__(f"sequence exceeded step cap after {len(events)} events")
        self.events = events
        self.factor = factor


@dataclass(frozen=True)
class ProtocolConfig:
    """Parameters of the preparation procedure."""
    m_cut: float = 0.0                 # exit threshold on |m|; 1/2 for odd N*2j
    convergence_streak: int = 5        # consecutive |m|<=m_cut outcomes = converged
    settle_streak: int = 20            # longer streak required before stopping
    max_rounds: int = 100
    max_sequence_steps: int = 10_000
    rotation_rule: str | Mapping[float, float] = "arcsin"
    subensemble_policy: str = "random-half"   # or "fixed-first-half"
    sampler: str = "exact"                    # or "accept-reject"

    def validate(self, shape: EnsembleShape) -> None:
        two_mcut = round(2 * self.m_cut)
        if self.m_cut < 0 or abs(2 * self.m_cut - two_mcut) > 1e-9:
            raise ValueError("m_cut must be a nonnegative half-integer")
        if self.m_cut >= shape.j_max:
            raise ValueError(f"m_cut {self.m_cut} must be below J_max {shape.j_max}")
        if self.convergence_streak < 2:
            raise ValueError("convergence_streak must be at least 2")
        if self.settle_streak < self.convergence_streak:
            raise ValueError("settle_streak must be >= convergence_streak")
        if self.max_rounds < 1 or self.max_sequence_steps < 1:
            raise ValueError("round and step caps must be positive")
        if self.subensemble_policy not in ("random-half", "fixed-first-half"):
            raise ValueError(f"unknown subensemble policy {self.subensemble_policy!r}")
        if isinstance(self.rotation_rule, str) and self.rotation_rule != "arcsin":
            raise ValueError(f"unknown rotation rule {self.rotation_rule!r}")
        make_sampler(self.sampler)


@dataclass(frozen=True)
class MeasurementEvent:
    """One projective outcome inside a sequence."""
    round_index: int
    basis: str                      # "z" or "x"
    m: float
    born_probability: float
    applied_theta: float            # 0.0 on terminal events
    subensemble: tuple[int, ...] | None
    n_c: int | None = None          # photon counts when the optical backend ran
    n_d: int | None = None


@dataclass(frozen=True)
class RoundRecord:
    """Observables after a completed round (k = 0 is the initial state)."""
    k: int
    jbar2: float
    var_x: float
    var_y: float
    var_z: float
    fidelity: float
    fidelity_by_singlet: tuple[float, ...]


@dataclass
class TrajectoryResult:
    config: ProtocolConfig
    seed: int
    events: list[MeasurementEvent]
    initial: RoundRecord
    rounds: list[RoundRecord]
    converged: bool
    converged_round: int | None     # round where the detection streak completed
    rounds_used: int                # rounds actually executed (includes settling)
    draws: int                      # random draws consumed

    @property
    def final(self) -> RoundRecord:
        return self.rounds[-1] if self.rounds else self.initial


def rotation_angle(m: float, j_max: float) -> float:
    """Conditional rotation angle arcsin(m / sqrt(J_max (J_max + 1))).

    Zero at m = 0 (the terminal no-op); always strictly inside (-pi/2, pi/2)
    because |m| <= J_max < sqrt(J_max (J_max + 1)).
    """
    if abs(m) > j_max + 1e-9:
        raise ValueError(f"|m|={abs(m)} exceeds J_max={j_max}")
    return float(np.arcsin(m / np.sqrt(j_max * (j_max + 1.0))))


def _theta_for(m: float, shape: EnsembleShape,
               rule: str | Mapping[float, float]) -> float:
    if isinstance(rule, str):
        return rotation_angle(m, shape.j_max)
    try:
        return float(rule[m])
    except KeyError:
        raise ValueError(f"rotation table has no entry for outcome m={m}") from None


def make_initial_state(kind: str, shape: EnsembleShape,
                       custom: State | None = None) -> State:
    """Initial states used by the experiments.

    "completely-mixed" is the infinite-temperature density operator.
    "y-polarized-coherent" is the maximal Dicke state rotated onto +y, i.e.
    exp(+i J^x pi/2) |m = +J_max>, which has <J^y> = +J_max.
    """
    if kind == "completely-mixed":
        return DensityOperator.completely_mixed(shape)
    if kind == "y-polarized-coherent":
        polarized = PureState.basis_state(shape, 0)   # every site at m = +j
        return hilbert.apply_rotation(polarized, "x", -np.pi / 2)
    if kind == "custom":
        if custom is None:
            raise ValueError("custom initial state requires the state")
        if custom.shape != shape:
            raise ValueError("custom state has the wrong shape")
        return custom
    raise ValueError(f"unknown initial state kind {kind!r}")


# ---------------------------------------------------------------------------
# measurement backends

class IdealMeasurement:
    """Exact projective measurement of the in-frame z magnetization."""

    def __init__(self, sampler_kind: str = "exact"):
        self._sample = make_sampler(sampler_kind)

    def measure(self, shape: EnsembleShape, factor: np.ndarray,
                rng: RandomStream):
        probs = factor_block_weights(shape, factor)
        dist = OutcomeDistribution(shape.two_m_values / 2.0, probs)
        m = self._sample(dist, rng)
        two_m = round(2 * m)
        keep = shape.two_m == two_m
        p = float(probs[(two_m - shape.two_m_values[0]) // 2])
        out = np.where(keep[:, None], factor, 0) / np.sqrt(p)
        return two_m, out, p, {}


def _compress_factor(shape: EnsembleShape, factor: np.ndarray,
                     two_m: int) -> np.ndarray:
    """Reduce excess columns of a block-supported factor via its Gram matrix.

    Worth doing only when the branch count clearly exceeds the support
    dimension (in practice: once, right after the first projection of a
    completely mixed start); afterwards the rank can never grow.
    """
    block = shape.blocks[two_m]
    if factor.shape[1] <= 2 * len(block):
        return factor
    sub = factor[block, :]
    gram = sub @ sub.conj().T
    w, v = np.linalg.eigh(gram)
    keep = w > 1e-15
    cols = v[:, keep] * np.sqrt(np.clip(w[keep], 0, None))
    out = np.zeros((shape.dim, cols.shape[1]), dtype=complex)
    out[block, :] = cols
    return out


# conjugate rotation generator per basis, expressed in the measurement frame:
# z-sequence runs in the lab frame and rotates about y by +theta; the
# x-sequence runs in the y(pi/2) frame where U^z(theta) becomes a rotation
# about x by -theta.
_IN_FRAME_ROTATION = {"z": ("y", +1.0), "x": ("x", -1.0)}


def _run_sequence_in_frame(shape: EnsembleShape, factor: np.ndarray, basis: str,
                           config: ProtocolConfig, rng: RandomStream, backend,
                           round_index: int, two_mcut: int):
    """Repeat-until-success sequence on an in-frame factor."""
    axis, sign = _IN_FRAME_ROTATION[basis]
    events = []
    for _ in range(config.max_sequence_steps):
        two_m, factor, p, extra = backend.measure(shape, factor, rng)
        factor = _compress_factor(shape, factor, two_m)
        m = two_m / 2.0
        if abs(two_m) <= two_mcut:
            events.append(MeasurementEvent(round_index, basis, m, p, 0.0, None,
                                           extra.get("n_c"), extra.get("n_d")))
            return factor, events
        theta = _theta_for(m, shape, config.rotation_rule)
        if config.subensemble_policy == "random-half":
            mask = SubensembleMask.half(shape, rng)
        else:
            mask = SubensembleMask.half(shape)
        events.append(MeasurementEvent(round_index, basis, m, p, theta,
                                       mask.members, extra.get("n_c"), extra.get("n_d")))
        u = shape.site_rotation(axis, sign * theta)
        factor = apply_site_unitary(shape, factor, u, mask.members)
    raise SequenceLimitError(events, factor)


def run_sequence(state: State, basis: str, config: ProtocolConfig,
                 rng: RandomStream, backend=None,
                 round_index: int = 0) -> tuple[State, list[MeasurementEvent]]:
    """Public repeat-until-success sequence on a normalized state."""
    shape = state.shape
    config.validate(shape)
    if basis not in ("z", "x"):
        raise ValueError(f"sequence basis must be 'z' or 'x', got {basis!r}")
    backend = backend or IdealMeasurement(config.sampler)
    factor = enter_frame(shape, _to_factor(state), basis)
    factor, events = _run_sequence_in_frame(
        shape, factor, basis, config, rng, backend, round_index,
        round(2 * config.m_cut))
    factor = leave_frame(shape, factor, basis)
    if isinstance(state, PureState):
        return PureState(shape, factor[:, 0]), events
    return DensityOperator(shape, factor @ factor.conj().T, validate=False), events


def _to_factor(state: State) -> np.ndarray:
    if isinstance(state, PureState):
        n2 = state.squared_norm
        if abs(n2 - 1.0) > 1e-8:
            raise ValueError("initial state must be normalized")
        return state.amplitudes[:, None].copy()
    tr = state.trace
    if abs(tr - 1.0) > 1e-8:
        raise ValueError("initial density matrix must have unit trace")
    flat = np.diag(np.full(state.shape.dim, 1.0 / state.shape.dim))
    if np.array_equal(state.matrix, flat.astype(complex)):
        # completely mixed: one branch per basis state, no eigensolve needed
        return np.eye(state.shape.dim, dtype=complex) / np.sqrt(state.shape.dim)
    return state.eigen_factor()


@lru_cache(maxsize=8)
def _cached_singlet_basis(n_particles: int, two_j: int) -> SingletBasis:
    return singlet_basis(EnsembleShape(n_particles, two_j))


def _observables(shape: EnsembleShape, factor: np.ndarray, k: int,
                 singlets: SingletBasis) -> RoundRecord:
    moments = {}
    for axis in ("x", "y", "z"):
        f = enter_frame(shape, factor, axis)
        row = (np.abs(f) ** 2).sum(axis=1)
        mv = shape.two_m / 2.0
        moments[axis] = (float(row @ mv), float(row @ mv ** 2))
    j2 = sum(second for _, second in moments.values())
    jbar2 = j2 / (shape.j_max * (shape.j_max + 1.0))
    var = {ax: max(second - first ** 2, 0.0) for ax, (first, second) in moments.items()}
    if len(singlets):
        overlaps = singlets.stacked().conj().T @ factor
        per = np.clip((np.abs(overlaps) ** 2).sum(axis=1), 0.0, None)
        fid, by = float(per.sum()), tuple(float(x) for x in per)
    else:
        fid, by = 0.0, ()
    return RoundRecord(k, jbar2, var["x"], var["y"], var["z"], fid, by)


def run_procedure(initial: State, config: ProtocolConfig, rng: RandomStream,
                  backend=None) -> TrajectoryResult:
    """Full alternating-basis preparation from a normalized initial state."""
    shape = initial.shape
    config.validate(shape)
    two_mcut = round(2 * config.m_cut)
    if two_mcut == 0 and multiplet_counts(shape).singlet_count == 0:
        raise ValueError(
            "the zero-total-spin sector is empty for this shape; set m_cut > 0")
    backend = backend or IdealMeasurement(config.sampler)
    singlets = _cached_singlet_basis(shape.n_particles, shape.two_j)

    factor = _to_factor(initial)
    events: list[MeasurementEvent] = []
    rounds: list[RoundRecord] = []
    initial_record = _observables(shape, factor, 0, singlets)
    streak = 0
    converged_round = None
    exhausted = False

    k = 0
    for k in range(1, config.max_rounds + 1):
        for basis in ("z", "x"):
            factor = enter_frame(shape, factor, basis)
            try:
                factor, seq_events = _run_sequence_in_frame(
                    shape, factor, basis, config, rng, backend, k, two_mcut)
            except SequenceLimitError as err:
                events.extend(err.events)
                factor = leave_frame(shape, err.factor, basis)
                exhausted = True
                break
            factor = leave_frame(shape, factor, basis)
            events.extend(seq_events)
            for ev in seq_events:
                if abs(round(2 * ev.m)) <= two_mcut:
                    streak += 1
                    if converged_round is None and streak >= config.convergence_streak:
                        converged_round = k
                else:
                    streak = 0
        rounds.append(_observables(shape, factor, k, singlets))
        if exhausted or streak >= config.settle_streak:
            break

    return TrajectoryResult(
        config=config,
        seed=rng.seed,
        events=events,
        initial=initial_record,
        rounds=rounds,
        converged=converged_round is not None and not exhausted,
        converged_round=converged_round,
        rounds_used=k,
        draws=rng.counter,
    )
