"""Total-spin multiplet accounting and singlet-sector observables.

Multiplicities D_J are computed exactly by iterated angular-momentum
addition.  An orthonormal basis of the J = 0 sector is obtained from the
eigendecomposition of the Casimir operator restricted to the zero
magnetization block, except for the N = 2 and N = 4 spin-1/2 ensembles where
the two standard explicit singlet pairs are used so that reported
per-singlet fidelities have a fixed, conventional meaning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hilbert import (
    ATOL,
    DensityOperator,
    EnsembleShape,
    PureState,
    State,
    apply_collective_sum,
    total_spin_squared,
)

CASIMIR_NULL_TOL = 1e-8   # eigenvalues below this count as J = 0 (gap is 2)


@dataclass(frozen=True)
class MultipletTable:
    """Multiplicity D_J of every total spin J, keyed by two_J = 2J."""
    shape: EnsembleShape
    counts: dict[int, int]

    def multiplicity(self, j_total: float) -> int:
        return self.counts.get(int(round(2 * j_total)), 0)

    @property
    def singlet_count(self) -> int:
        return self.counts.get(0, 0)

    def total_dimension(self) -> int:
        return sum(d * (two_j + 1) for two_j, d in self.counts.items())


def multiplet_counts(shape: EnsembleShape) -> MultipletTable:
    """D_J for all reachable J, by convolving one spin at a time.

    Adding a spin j to a multiplet J branches into |J-j| .. J+j; counts are
    exact Python integers.
    """
    two_j = shape.two_j
    counts: dict[int, int] = {two_j: 1}
    for _ in range(shape.n_particles - 1):
        nxt: dict[int, int] = {}
        for two_J, mult in counts.items():
            for two_Jp in range(abs(two_J - two_j), two_J + two_j + 1, 2):
                nxt[two_Jp] = nxt.get(two_Jp, 0) + mult
        counts = nxt
    return MultipletTable(shape, dict(sorted(counts.items())))


@dataclass(frozen=True)
class SingletBasis:
    """Orthonormal basis of the zero-total-spin sector."""
    shape: EnsembleShape
    vectors: tuple[PureState, ...]
    provenance: str   # "paper-explicit" | "numerically-constructed" | "empty"

    def __len__(self):
        return len(self.vectors)

    def stacked(self) -> np.ndarray:
        """(dim, D_0) array of the basis vectors as columns."""
        if not self.vectors:
            return np.zeros((self.shape.dim, 0), dtype=complex)
        return np.stack([v.amplitudes for v in self.vectors], axis=1)


def _two_spin_singlet(shape: EnsembleShape) -> np.ndarray:
    v = np.zeros(shape.dim, dtype=complex)
    v[0b01] = 1 / np.sqrt(2)
    v[0b10] = -1 / np.sqrt(2)
    return v


def _four_spin_singlets(shape: EnsembleShape) -> list[np.ndarray]:
    """The conventional explicit pair: Bell-pair combinations on sites (12)(34)."""
    up = np.array([1, 0], dtype=complex)
    dn = np.array([0, 1], dtype=complex)
    phi_p = (np.kron(up, up) + np.kron(dn, dn)) / np.sqrt(2)
    phi_m = (np.kron(up, up) - np.kron(dn, dn)) / np.sqrt(2)
    psi_p = (np.kron(up, dn) + np.kron(dn, up)) / np.sqrt(2)
    psi_m = (np.kron(up, dn) - np.kron(dn, up)) / np.sqrt(2)
    first = (np.kron(phi_p, phi_p) - np.kron(phi_m, phi_m)
             - np.kron(psi_p, psi_p)) / np.sqrt(3)
    second = np.kron(psi_m, psi_m)
    return [first, second]


def _casimir_on_block(shape: EnsembleShape, block: np.ndarray) -> np.ndarray:
    """J^2 restricted to a basis-index block, built by applying J^a twice."""
    cols = np.zeros((shape.dim, len(block)), dtype=complex)
    cols[block, np.arange(len(block))] = 1.0
    acc = np.zeros_like(cols)
    sites = range(shape.n_particles)
    for ax in ("x", "y", "z"):
        op = shape.site_matrix(ax)
        acc += apply_collective_sum(
            shape, apply_collective_sum(shape, cols, op, sites), op, sites)
    return cols.conj().T @ acc


def _canonical_order(vectors: np.ndarray) -> np.ndarray:
    """Deterministic ordering and phase convention for degenerate eigenvectors.

    Sort by the index of the largest-magnitude amplitude (ties broken by the
    next indices), then rotate each vector's phase so its first
    non-negligible amplitude is real positive.
    """
    def sort_key(col):
        mags = np.round(np.abs(col), 12)
        return tuple(np.lexsort((np.arange(len(col)), -mags))[:4])

    order = sorted(range(vectors.shape[1]), key=lambda c: sort_key(vectors[:, c]))
    out = vectors[:, order].copy()
    for c in range(out.shape[1]):
        nz = np.nonzero(np.abs(out[:, c]) > 1e-9)[0]
        if len(nz):
            ph = out[nz[0], c]
            out[:, c] *= np.conj(ph) / abs(ph)
    return out


def singlet_basis(shape: EnsembleShape) -> SingletBasis:
    """Orthonormal spanning set of the J = 0 sector (empty when none exists)."""
    table = multiplet_counts(shape)
    d0 = table.singlet_count
    if d0 == 0:
        return SingletBasis(shape, (), "empty")
    if shape.two_j == 1 and shape.n_particles == 2:
        return SingletBasis(shape, (PureState(shape, _two_spin_singlet(shape)),),
                            "paper-explicit")
    if shape.two_j == 1 and shape.n_particles == 4:
        vecs = tuple(PureState(shape, v) for v in _four_spin_singlets(shape))
        return SingletBasis(shape, vecs, "paper-explicit")
    block = shape.blocks[0]
    j2 = _casimir_on_block(shape, block)
    w, v = np.linalg.eigh(j2)
    null = v[:, w < CASIMIR_NULL_TOL]
    if null.shape[1] != d0:
        raise AssertionError(
            f"Casimir null space dimension {null.shape[1]} != counted D_0 {d0}")
    null = _canonical_order(null)
    vectors = []
    for c in range(d0):
        amp = np.zeros(shape.dim, dtype=complex)
        amp[block] = null[:, c]
        vectors.append(PureState(shape, amp))
    return SingletBasis(shape, tuple(vectors), "numerically-constructed")


def fidelities(state: State, basis: SingletBasis) -> tuple[float, list[float]]:
    """(F, [F_d]) where F_d is the weight on each singlet basis vector.

    F equals the total J = 0 population and is independent of the basis
    choice; the decomposition F_d is conventional for degenerate sectors.
    """
    if state.shape != basis.shape:
        raise ValueError("state and singlet basis shapes differ")
    if not basis.vectors:
        return 0.0, []
    stacked = basis.stacked()
    if isinstance(state, PureState):
        amps = stacked.conj().T @ state.amplitudes
        per = np.abs(amps) ** 2
    else:
        per = np.real(np.einsum("id,ij,jd->d", stacked.conj(), state.matrix, stacked))
    per = np.clip(per, 0.0, None)
    return float(per.sum()), [float(x) for x in per]


def normalized_total_spin_squared(state: State) -> float:
    """<J^2> / (J_max (J_max + 1)); zero exactly on the singlet sector."""
    jmax = state.shape.j_max
    return total_spin_squared(state) / (jmax * (jmax + 1))


def catalan_singlet_count(n_particles: int) -> int:
    """Independent D_0 oracle for spin-1/2: C(N, N/2) - C(N, N/2 - 1)."""
    if n_particles % 2:
        return 0
    from math import comb
    half = n_particles // 2
    return comb(n_particles, half) - comb(n_particles, half - 1)
