"""Exact product-basis representation of N spin-j ensembles.

States live in the full (2j+1)^N product space.  Collective magnetization
projectors, subensemble rotations, and spin moments are implemented without
ever exponentiating (2j+1)^N-dimensional operators: rotations factorize into
single-site unitaries, z-basis projections are index masks over precomputed
magnetization blocks, and x/y-basis operations go through a global basis
rotation.  Half-integer spins and magnetizations are handled exactly by
storing doubled (integer) values where they are used as keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ATOL = 1e-10          # numerical tolerance for hermiticity/norm checks
PROB_FLOOR = 1e-12    # Born weights at or below this count as impossible

_AXES = ("x", "y", "z")


class ImpossibleOutcomeError(ValueError):
    """Raised when a projection is requested onto an outcome of ~zero weight."""


def _single_spin_matrices(two_j: int) -> dict[str, np.ndarray]:
    """Spin matrices for a single spin j = two_j/2, basis ordered m = +j..-j."""
    d = two_j + 1
    j = two_j / 2.0
    m = j - np.arange(d)
    ladder = np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1))
    jp = np.diag(ladder, 1).astype(complex)
    jm = jp.conj().T
    return {
        "x": 0.5 * (jp + jm),
        "y": -0.5j * (jp - jm),
        "z": np.diag(m).astype(complex),
    }


class EnsembleShape:
    """Immutable description of an ensemble of N identical spins.

    Spin per particle is stored as the integer two_j = 2j so half-integer
    spins stay exact.  Construction precomputes the product-basis
    magnetization partition and per-site spin matrices shared by all
    operations on states of this shape.
    """

    def __init__(self, n_particles: int, two_j: int = 1, max_qubit_equivalents: float = 16.0):
        if n_particles < 1 or int(n_particles) != n_particles:
            raise ValueError(f"particle count must be a positive integer, got {n_particles}")
        if two_j < 1 or int(two_j) != two_j:
            raise ValueError(f"two_j must be a positive integer, got {two_j}")
        n_particles, two_j = int(n_particles), int(two_j)
        cost = n_particles * np.log2(two_j + 1)
        if cost > max_qubit_equivalents + 1e-9:
            raise ValueError(
                f"shape N={n_particles}, 2j={two_j} needs {cost:.1f} qubit-equivalents "
                f"(> cap {max_qubit_equivalents}); raise max_qubit_equivalents explicitly "
                "if this is intentional")
        self.n_particles = n_particles
        self.two_j = two_j
        self.site_dim = two_j + 1
        self.dim = self.site_dim ** n_particles
        self.j_max = n_particles * two_j / 2.0
        self.j_min = (n_particles % 2) * two_j / 2.0
        self._site = _single_spin_matrices(two_j)
        # base-(2j+1) digit of each product index per site; m_site = j - digit
        digits = np.indices((self.site_dim,) * n_particles).reshape(n_particles, -1)
        self.two_m = (two_j - 2 * digits).sum(axis=0).astype(np.int64)
        self.two_m_values = np.arange(-n_particles * two_j, n_particles * two_j + 1, 2)
        self.blocks = {int(t): np.nonzero(self.two_m == t)[0] for t in self.two_m_values}
        # eigendecomposition of each site spin matrix, for exact exp(-i theta j_axis)
        self._site_eig = {ax: np.linalg.eigh(self._site[ax]) for ax in _AXES}

    def site_matrix(self, axis: str) -> np.ndarray:
        if axis not in _AXES:
            raise ValueError(f"unknown axis {axis!r}")
        return self._site[axis]

    def site_rotation(self, axis: str, theta: float) -> np.ndarray:
        """exp(-i theta j_axis) on one site, via the cached eigenbasis."""
        if axis not in _AXES:
            raise ValueError(f"unknown axis {axis!r}")
        w, v = self._site_eig[axis]
        return (v * np.exp(-1j * theta * w)) @ v.conj().T

    def magnetizations(self) -> np.ndarray:
        """Allowed collective z-magnetizations, ascending."""
        return self.two_m_values / 2.0

    def __repr__(self):
        return f"EnsembleShape(N={self.n_particles}, two_j={self.two_j})"

    def __eq__(self, other):
        return (isinstance(other, EnsembleShape)
                and self.n_particles == other.n_particles and self.two_j == other.two_j)

    def __hash__(self):
        return hash((self.n_particles, self.two_j))


@dataclass(frozen=True)
class SubensembleMask:
    """A subset of particle indices targeted by a partial rotation."""
    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted(int(i) for i in self.members))
        object.__setattr__(self, "members", members)
        if len(set(members)) != len(members):
            raise ValueError("subensemble indices must be distinct")

    def validate(self, shape: EnsembleShape) -> None:
        for i in self.members:
            if not 0 <= i < shape.n_particles:
                raise ValueError(f"site index {i} outside [0, {shape.n_particles})")

    @staticmethod
    def half(shape: EnsembleShape, rng=None) -> "SubensembleMask":
        """floor(N/2) sites, randomly chosen when an rng is supplied."""
        k = shape.n_particles // 2
        if rng is None:
            return SubensembleMask(tuple(range(k)))
        return SubensembleMask(tuple(rng.choose_subset(shape.n_particles, k)))


class PureState:
    """A (possibly unnormalized) state vector over the product basis."""

    def __init__(self, shape: EnsembleShape, amplitudes: np.ndarray):
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (shape.dim,):
            raise ValueError(f"amplitude vector must have length {shape.dim}")
        self.shape = shape
        self.amplitudes = amplitudes

    @property
    def squared_norm(self) -> float:
        return float(np.real(np.vdot(self.amplitudes, self.amplitudes)))

    def normalize(self) -> "PureState":
        n2 = self.squared_norm
        if n2 <= PROB_FLOOR:
            raise ValueError("cannot normalize a numerically dead state")
        return PureState(self.shape, self.amplitudes / np.sqrt(n2))

    def copy(self) -> "PureState":
        return PureState(self.shape, self.amplitudes.copy())

    @staticmethod
    def basis_state(shape: EnsembleShape, index: int) -> "PureState":
        v = np.zeros(shape.dim, dtype=complex)
        v[index] = 1.0
        return PureState(shape, v)

    def overlap_squared(self, other: "PureState") -> float:
        """|<self|other>|^2; global-phase-insensitive equality measure."""
        return float(abs(np.vdot(self.amplitudes, other.amplitudes)) ** 2)


class DensityOperator:
    """A density matrix on the product space."""

    def __init__(self, shape: EnsembleShape, matrix: np.ndarray, validate: bool = True):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (shape.dim, shape.dim):
            raise ValueError(f"matrix must be {shape.dim} x {shape.dim}")
        if validate:
            if not np.allclose(matrix, matrix.conj().T, atol=ATOL):
                raise ValueError("density matrix must be Hermitian")
        self.shape = shape
        self.matrix = matrix

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    def normalize(self) -> "DensityOperator":
        t = self.trace
        if t <= PROB_FLOOR:
            raise ValueError("cannot normalize a numerically dead density matrix")
        return DensityOperator(self.shape, self.matrix / t, validate=False)

    def copy(self) -> "DensityOperator":
        return DensityOperator(self.shape, self.matrix.copy(), validate=False)

    @staticmethod
    def completely_mixed(shape: EnsembleShape) -> "DensityOperator":
        return DensityOperator(
            shape, np.eye(shape.dim, dtype=complex) / shape.dim, validate=False)

    @staticmethod
    def from_pure(state: PureState) -> "DensityOperator":
        v = state.amplitudes
        return DensityOperator(state.shape, np.outer(v, v.conj()), validate=False)

    def eigen_factor(self, tol: float = 1e-14) -> np.ndarray:
        """K with K K^dagger = matrix; columns are weighted eigenvectors."""
        w, v = np.linalg.eigh(self.matrix)
        if w.min() < -1e-9:
            raise ValueError(f"density matrix has negative eigenvalue {w.min():.3e}")
        keep = w > tol
        return v[:, keep] * np.sqrt(np.clip(w[keep], 0, None))


State = PureState | DensityOperator


@dataclass
class CollectiveObservable:
    """Dense Hermitian collective operator with magnetization-block metadata.

    axis is one of "x", "y", "z" for the summed spin component, or "J2" for
    the total-spin-squared (Casimir) operator.  mask restricts the site sum
    to a subensemble.
    """
    shape: EnsembleShape
    axis: str
    mask: SubensembleMask | None
    matrix: np.ndarray
    blocks: dict[int, np.ndarray] = field(repr=False, default_factory=dict)


# ---------------------------------------------------------------------------
# low-level kernels shared by states and ensemble factors
#
# A "factor" is a (dim, r) complex array K representing rho = K K^dagger;
# a pure state is the r = 1 special case.  All state manipulation below is
# expressed on factors, so the same code drives pure vectors, density
# matrices (through their eigen-factor), and branch ensembles.

def apply_site_unitary(shape: EnsembleShape, factor: np.ndarray, u: np.ndarray,
                       sites: Iterable[int]) -> np.ndarray:
    """Apply one single-site unitary to the given sites of a (dim, r) factor."""
    n, d = shape.n_particles, shape.site_dim
    r = factor.shape[1]
    t = factor.reshape((d,) * n + (r,))
    for site in sites:
        t = np.moveaxis(np.tensordot(u, t, axes=([1], [site])), 0, site)
    return t.reshape(shape.dim, r)


def apply_collective_sum(shape: EnsembleShape, factor: np.ndarray, op: np.ndarray,
                         sites: Iterable[int]) -> np.ndarray:
    """Apply sum_n op_n over the given sites to a (dim, r) factor."""
    n, d = shape.n_particles, shape.site_dim
    r = factor.shape[1]
    t = factor.reshape((d,) * n + (r,))
    acc = np.zeros_like(t)
    for site in sites:
        acc += np.moveaxis(np.tensordot(op, t, axes=([1], [site])), 0, site)
    return acc.reshape(shape.dim, r)


# frame rotations mapping a measurement axis onto z:
#   P^x_m = U^y(pi/2)  P^z_m U^y(pi/2)^dagger
#   P^y_m = U^x(-pi/2) P^z_m U^x(-pi/2)^dagger
_FRAME = {"z": None, "x": ("y", np.pi / 2), "y": ("x", -np.pi / 2)}


def enter_frame(shape: EnsembleShape, factor: np.ndarray, basis: str) -> np.ndarray:
    """Rotate a factor so that `basis`-magnetization becomes z-magnetization."""
    fr = _FRAME[basis]
    if fr is None:
        return factor
    axis, angle = fr
    u = shape.site_rotation(axis, -angle)   # U^dagger acts on the state
    return apply_site_unitary(shape, factor, u, range(shape.n_particles))


def leave_frame(shape: EnsembleShape, factor: np.ndarray, basis: str) -> np.ndarray:
    fr = _FRAME[basis]
    if fr is None:
        return factor
    axis, angle = fr
    u = shape.site_rotation(axis, angle)
    return apply_site_unitary(shape, factor, u, range(shape.n_particles))


def factor_block_weights(shape: EnsembleShape, factor: np.ndarray) -> np.ndarray:
    """Row weights summed per magnetization block, ordered as two_m_values."""
    row = (np.abs(factor) ** 2).sum(axis=1)
    # two_m runs over even-stepped integers from -N*2j; map to block ordinal
    ordinal = (shape.two_m - shape.two_m_values[0]) // 2
    return np.bincount(ordinal, weights=row, minlength=len(shape.two_m_values))


def _as_factor(state: State) -> np.ndarray:
    if isinstance(state, PureState):
        return state.amplitudes[:, None]
    return state.eigen_factor()


# ---------------------------------------------------------------------------
# public operations

def build_observable(shape: EnsembleShape, axis: str,
                     mask: SubensembleMask | None = None) -> CollectiveObservable:
    """Dense collective operator: sum of site spins along an axis, or the Casimir.

    axis "J2" builds (J^x)^2 + (J^y)^2 + (J^z)^2 over the masked sites.
    Intended for moderate dimensions; state evolution never needs it.
    """
    if axis not in _AXES and axis != "J2":
        raise ValueError(f"unsupported axis tag {axis!r}")
    if mask is not None:
        mask.validate(shape)
    sites = list(mask.members) if mask is not None else list(range(shape.n_particles))

    def summed(ax: str) -> np.ndarray:
        cols = apply_collective_sum(
            shape, np.eye(shape.dim, dtype=complex), shape.site_matrix(ax), sites)
        return cols

    if axis == "J2":
        matrix = np.zeros((shape.dim, shape.dim), dtype=complex)
        for ax in _AXES:
            j = summed(ax)
            matrix += j @ j
    else:
        matrix = summed(axis)
    return CollectiveObservable(shape, axis, mask, matrix, shape.blocks)


def projector(shape: EnsembleShape, basis: str, m: float) -> np.ndarray:
    """Dense projector onto collective magnetization m in the z or x basis."""
    two_m = _check_outcome(shape, m)
    diag = (shape.two_m == two_m).astype(complex)
    pz = np.diag(diag)
    if basis == "z":
        return pz
    if basis == "x":
        u = shape.site_rotation("y", np.pi / 2)
        cols = apply_site_unitary(shape, pz, u, range(shape.n_particles))
        rows = apply_site_unitary(shape, cols.conj().T, u, range(shape.n_particles))
        return rows.conj().T
    raise ValueError(f"unsupported projection basis {basis!r}")


def _check_outcome(shape: EnsembleShape, m: float) -> int:
    two_m = int(round(2 * m))
    if abs(2 * m - two_m) > 1e-9 or abs(two_m) > shape.n_particles * shape.two_j \
            or (two_m - shape.two_m_values[0]) % 2 != 0:
        raise ValueError(f"magnetization {m} not in the spectrum of this shape")
    return two_m


def magnetization_distribution(state: State, basis: str) -> tuple[np.ndarray, np.ndarray]:
    """Born weights of all collective-magnetization outcomes in a basis.

    Returns (m_values ascending, probabilities).  Weights at or below the
    probability floor are zeroed so samplers never select dead branches.
    """
    shape = state.shape
    factor = enter_frame(shape, _as_factor(state), basis)
    probs = factor_block_weights(shape, factor)
    probs = np.where(probs > PROB_FLOOR, probs, 0.0)
    return shape.two_m_values / 2.0, probs


def apply_projection(state: State, basis: str, m: float) -> tuple[State, float]:
    """Project onto collective magnetization m; return normalized state and weight.

    Raises ImpossibleOutcomeError when the Born weight is at or below the
    probability floor; callers must not select such outcomes.
    """
    shape = state.shape
    two_m = _check_outcome(shape, m)
    keep = shape.two_m == two_m
    if isinstance(state, PureState):
        factor = enter_frame(shape, state.amplitudes[:, None], basis)
        factor = np.where(keep[:, None], factor, 0)
        p = float((np.abs(factor) ** 2).sum())
        if p <= PROB_FLOOR:
            raise ImpossibleOutcomeError(
                f"outcome m={m} in basis {basis!r} has weight {p:.3e}")
        factor = leave_frame(shape, factor / np.sqrt(p), basis)
        return PureState(shape, factor[:, 0]), p
    factor = enter_frame(shape, state.eigen_factor(), basis)
    factor = np.where(keep[:, None], factor, 0)
    p = float((np.abs(factor) ** 2).sum())
    if p <= PROB_FLOOR:
        raise ImpossibleOutcomeError(
            f"outcome m={m} in basis {basis!r} has weight {p:.3e}")
    factor = leave_frame(shape, factor / np.sqrt(p), basis)
    return DensityOperator(shape, factor @ factor.conj().T, validate=False), p


def apply_rotation(state: State, axis: str, theta: float,
                   mask: SubensembleMask | None = None) -> State:
    """exp(-i theta J^axis_S) applied as a product of single-site rotations."""
    shape = state.shape
    if not np.isfinite(theta):
        raise ValueError("rotation angle must be finite")
    if mask is not None:
        mask.validate(shape)
    sites = list(mask.members) if mask is not None else list(range(shape.n_particles))
    u = shape.site_rotation(axis, theta)
    if isinstance(state, PureState):
        out = apply_site_unitary(shape, state.amplitudes[:, None], u, sites)
        return PureState(shape, out[:, 0])
    cols = apply_site_unitary(shape, state.matrix, u, sites)
    rows = apply_site_unitary(shape, cols.conj().T, u, sites)
    return DensityOperator(shape, rows.conj().T, validate=False)


def expectation(state: State, observable: CollectiveObservable) -> float:
    """<A> for a dense observable; imaginary residue must stay below 1e-10."""
    if state.shape != observable.shape:
        raise ValueError("state and observable shapes differ")
    if isinstance(state, PureState):
        v = state.amplitudes
        val = complex(np.vdot(v, observable.matrix @ v))
    else:
        val = complex(np.trace(observable.matrix @ state.matrix))
    if abs(val.imag) > 1e-8:
        raise ValueError(f"expectation has non-negligible imaginary part {val.imag:.3e}")
    return float(val.real)


def axis_moments(state: State, axis: str) -> tuple[float, float]:
    """(<J^axis>, <(J^axis)^2>) via a frame rotation and diagonal sums.

    Cost is O(N dim r); no dense operator is built, so this is the path used
    inside trajectory evolution at large N.
    """
    shape = state.shape
    if axis not in _AXES:
        raise ValueError(f"unknown axis {axis!r}")
    factor = enter_frame(shape, _as_factor(state), axis)
    row = (np.abs(factor) ** 2).sum(axis=1)
    mvals = shape.two_m / 2.0
    return float(row @ mvals), float(row @ mvals ** 2)


def variance(state: State, axis: str) -> float:
    """(Delta J^axis)^2, clamped into [0, inf) against roundoff."""
    first, second = axis_moments(state, axis)
    return max(second - first ** 2, 0.0)


def total_spin_squared(state: State) -> float:
    """<J^2> as the sum of the three second moments."""
    return sum(axis_moments(state, ax)[1] for ax in _AXES)
