"""Truncated product-Fock basis and sparse operator algebra.

The register mixes bosonic modes (cavity photons, collective spin
oscillators) with three-level transmons.  The basis keeps every occupation
tuple compatible with the per-mode cutoffs and a global excitation cutoff.
Enumeration is graded: tuples are sorted by total excitation number first
and lexicographically within a grade, so that fixed-excitation sectors
occupy contiguous index ranges.  Everything downstream (propagators, jump
cascades) leans on that grading.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

PHOTON_LOGICAL = "photon-logical"
PHOTON_AUXILIARY = "photon-auxiliary"
SPIN_OSC_MINUS = "spin-osc-minus"
SPIN_OSC_PLUS = "spin-osc-plus"
TRANSMON = "transmon"

MODE_KINDS = (PHOTON_LOGICAL, PHOTON_AUXILIARY, SPIN_OSC_MINUS, SPIN_OSC_PLUS, TRANSMON)
BOSONIC_KINDS = (PHOTON_LOGICAL, PHOTON_AUXILIARY, SPIN_OSC_MINUS, SPIN_OSC_PLUS)
TRANSMON_CUTOFF = 2  # levels 0, 1, 2

COALESCE_DROP = 1e-14


class HilbertError(ValueError):
    """Invalid mode list, basis request, or operator combination."""


@dataclass(frozen=True)
class ModeSpec:
    """One register mode: a boson (photon / spin oscillator) or a transmon.

    ``cutoff`` is the maximum occupation (transmons are fixed at 2, i.e.
    levels 0, 1, 2).  ``cavity`` names the resonator housing the mode.
    """

    id: str
    kind: str
    cutoff: int
    cavity: str

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise HilbertError(f"unknown mode kind {self.kind!r}")
        if self.kind == TRANSMON:
            if self.cutoff != TRANSMON_CUTOFF:
                raise HilbertError("transmon modes have exactly 3 levels (cutoff 2)")
        elif self.cutoff < 1:
            raise HilbertError(f"bosonic cutoff must be >= 1, got {self.cutoff}")

    @property
    def is_bosonic(self) -> bool:
        return self.kind != TRANSMON


class SpaceDescriptor:
    """Enumerated truncated basis over an ordered list of modes.

    The basis contains every occupation tuple obeying all per-mode cutoffs
    with total occupation <= ``global_cutoff``; transmon levels count as
    excitations.  Index order is graded (total excitation ascending,
    lexicographic within a grade) and therefore reproducible.
    """

    def __init__(self, modes: Sequence[ModeSpec], global_cutoff: int):
        modes = tuple(modes)
        if not modes:
            raise HilbertError("mode list must be nonempty")
        if global_cutoff < 0:
            raise HilbertError("global_cutoff must be >= 0")
        ids = [m.id for m in modes]
        if len(set(ids)) != len(ids):
            raise HilbertError("mode ids must be unique")

        self.modes = modes
        self.global_cutoff = int(global_cutoff)
        self._pos = {m.id: i for i, m in enumerate(modes)}

        cutoffs = [m.cutoff for m in modes]
        tuples: list[tuple[int, ...]] = []
        stack = [()]
        for pos, cap in enumerate(cutoffs):
            nxt = []
            for prefix in stack:
                budget = self.global_cutoff - sum(prefix)
                for n in range(min(cap, budget) + 1):
                    nxt.append(prefix + (n,))
            stack = nxt
        tuples = sorted(stack, key=lambda t: (sum(t), t))

        self.basis: tuple[tuple[int, ...], ...] = tuple(tuples)
        self.dim = len(tuples)
        self.index: dict[tuple[int, ...], int] = {t: i for i, t in enumerate(tuples)}
        self.occupations = np.array(tuples, dtype=np.int64)
        self.totals = self.occupations.sum(axis=1)

        # contiguous sector slices, one per total-excitation number
        bounds = np.searchsorted(self.totals, np.arange(self.global_cutoff + 2))
        self.sector_slices = {
            n: slice(int(bounds[n]), int(bounds[n + 1]))
            for n in range(self.global_cutoff + 1)
            if bounds[n + 1] > bounds[n]
        }

    def mode_position(self, mode_id: str) -> int:
        try:
            return self._pos[mode_id]
        except KeyError:
            raise HilbertError(f"unknown mode {mode_id!r}") from None

    def mode(self, mode_id: str) -> ModeSpec:
        return self.modes[self.mode_position(mode_id)]

    def index_of(self, occupation: Iterable[int]) -> int:
        t = tuple(occupation)
        try:
            return self.index[t]
        except KeyError:
            raise HilbertError(f"occupation {t} not in truncated basis") from None

    def modes_in_cavity(self, cavity: str) -> list[ModeSpec]:
        return [m for m in self.modes if m.cavity == cavity]

    def sector_of(self, basis_index: int) -> int:
        return int(self.totals[basis_index])

    def vacuum_index(self) -> int:
        return self.index_of((0,) * len(self.modes))

    def dump_basis_csv(self, fh) -> None:
        """Debug dump: one line per basis state, `index, occupations...`."""
        header = "index," + ",".join(m.id for m in self.modes)
        fh.write(header + "\n")
        for i, occ in enumerate(self.basis):
            fh.write(f"{i}," + ",".join(str(n) for n in occ) + "\n")


def enumerate_basis(modes: Sequence[ModeSpec], global_cutoff: int) -> SpaceDescriptor:
    """Build the truncated basis for ``modes`` under a total-excitation cap."""
    return SpaceDescriptor(modes, global_cutoff)


def _coalesce(dim, rows, cols, vals):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.complex128)
    if rows.size:
        if rows.min() < 0 or rows.max() >= dim or cols.min() < 0 or cols.max() >= dim:
            raise HilbertError("entry index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        key = rows * dim + cols
        uniq, start = np.unique(key, return_index=True)
        summed = np.add.reduceat(vals, start) if start.size else vals[:0]
        rows = (uniq // dim).astype(np.int64)
        cols = (uniq % dim).astype(np.int64)
        vals = summed
        keep = np.abs(vals) >= COALESCE_DROP
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    return rows, cols, vals


class SparseOperator:
    """Immutable COO-style sparse operator on the truncated basis.

    Duplicate (row, col) pairs are summed at construction and entries with
    magnitude below 1e-14 dropped, so equality of operators is equality of
    their coalesced entry lists.
    """

    __slots__ = ("dim", "rows", "cols", "vals", "_csr")

    def __init__(self, dim: int, rows=(), cols=(), vals=()):
        self.dim = int(dim)
        self.rows, self.cols, self.vals = _coalesce(self.dim, rows, cols, vals)
        self._csr = None

    @classmethod
    def from_entries(cls, dim: int, entries: Iterable[tuple[int, int, complex]]) -> "SparseOperator":
        entries = list(entries)
        if not entries:
            return cls(dim)
        r, c, v = zip(*entries)
        return cls(dim, r, c, v)

    @classmethod
    def identity(cls, dim: int) -> "SparseOperator":
        idx = np.arange(dim)
        return cls(dim, idx, idx, np.ones(dim))

    @classmethod
    def from_diagonal(cls, diag) -> "SparseOperator":
        diag = np.asarray(diag, dtype=np.complex128)
        idx = np.arange(diag.size)
        return cls(diag.size, idx, idx, diag)

    @property
    def entries(self) -> list[tuple[int, int, complex]]:
        return [(int(r), int(c), complex(v)) for r, c, v in zip(self.rows, self.cols, self.vals)]

    @property
    def nnz(self) -> int:
        return self.vals.size

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.vals, (self.rows, self.cols)), shape=(self.dim, self.dim)
            )
        return self._csr

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=np.complex128)
        out[self.rows, self.cols] = self.vals
        return out

    def adjoint(self) -> "SparseOperator":
        return SparseOperator(self.dim, self.cols, self.rows, np.conj(self.vals))

    def scale(self, factor: complex) -> "SparseOperator":
        return SparseOperator(self.dim, self.rows, self.cols, self.vals * factor)

    def apply(self, state: np.ndarray) -> np.ndarray:
        """Sparse @ dense kernel for vectors or matrices."""
        state = np.asarray(state)
        if state.shape[0] != self.dim:
            raise HilbertError(f"dimension mismatch: operator {self.dim}, state {state.shape[0]}")
        return self.to_csr() @ state

    def max_abs(self) -> float:
        return float(np.abs(self.vals).max()) if self.nnz else 0.0

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        d = self - self.adjoint()
        return d.max_abs() <= tol

    def excitation_grade(self, space: SpaceDescriptor) -> int | None:
        """Common total-excitation change of all entries, or None if mixed."""
        if self.nnz == 0:
            return 0
        delta = space.totals[self.rows] - space.totals[self.cols]
        return int(delta[0]) if np.all(delta == delta[0]) else None

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        if self.dim != other.dim:
            raise HilbertError("dimension mismatch in operator sum")
        return SparseOperator(
            self.dim,
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.vals, other.vals]),
        )

    def __sub__(self, other: "SparseOperator") -> "SparseOperator":
        return self + other.scale(-1.0)

    def __mul__(self, factor: complex) -> "SparseOperator":
        return self.scale(factor)

    __rmul__ = __mul__

    def __matmul__(self, other: "SparseOperator") -> "SparseOperator":
        if self.dim != other.dim:
            raise HilbertError("dimension mismatch in operator product")
        prod = (self.to_csr() @ other.to_csr()).tocoo()
        return SparseOperator(self.dim, prod.row, prod.col, prod.data)

    def __repr__(self):
        return f"SparseOperator(dim={self.dim}, nnz={self.nnz})"


def apply(op: SparseOperator, state: np.ndarray) -> np.ndarray:
    return op.apply(state)


def zero_operator(dim: int) -> SparseOperator:
    return SparseOperator(dim)


def ladder(space: SpaceDescriptor, mode_id: str, direction: str = "lower") -> SparseOperator:
    """Bosonic ladder operator on one mode, truncated to the basis.

    The lowering operator carries the harmonic-oscillator matrix element
    sqrt(n); raising is its adjoint.  Transitions that would leave the
    truncated basis are dropped.
    """
    pos = space.mode_position(mode_id)
    mode = space.modes[pos]
    if not mode.is_bosonic:
        raise HilbertError(f"mode {mode_id!r} is a transmon; use transmon_transition")
    if direction not in ("lower", "raise"):
        raise HilbertError(f"direction must be 'lower' or 'raise', got {direction!r}")

    rows, cols, vals = [], [], []
    for i, occ in enumerate(space.basis):
        n = occ[pos]
        if n == 0:
            continue
        target = occ[:pos] + (n - 1,) + occ[pos + 1 :]
        j = space.index[target]  # always present: lower total excitation
        rows.append(j)
        cols.append(i)
        vals.append(np.sqrt(n))
    low = SparseOperator(space.dim, rows, cols, vals)
    return low if direction == "lower" else low.adjoint()


def transmon_transition(space: SpaceDescriptor, cavity: str, k: int) -> SparseOperator:
    """|psi_k><psi_{k+1}| on the transmon housed in ``cavity`` (k in {0, 1})."""
    if k not in (0, 1):
        raise HilbertError(f"transmon transition index k must be 0 or 1, got {k}")
    transmons = [m for m in space.modes_in_cavity(cavity) if m.kind == TRANSMON]
    if not transmons:
        raise HilbertError(f"cavity {cavity!r} hosts no transmon")
    pos = space.mode_position(transmons[0].id)

    rows, cols, vals = [], [], []
    for i, occ in enumerate(space.basis):
        if occ[pos] != k + 1:
            continue
        target = occ[:pos] + (k,) + occ[pos + 1 :]
        rows.append(space.index[target])
        cols.append(i)
        vals.append(1.0)
    return SparseOperator(space.dim, rows, cols, vals)


def number_op(space: SpaceDescriptor, mode_id: str) -> SparseOperator:
    """Occupation-number operator of one mode (transmon level for transmons)."""
    pos = space.mode_position(mode_id)
    return SparseOperator.from_diagonal(space.occupations[:, pos].astype(np.complex128))


def total_excitation_op(space: SpaceDescriptor) -> SparseOperator:
    """N_tot = sum of all mode occupations (transmon levels included)."""
    return SparseOperator.from_diagonal(space.totals.astype(np.complex128))


def weighted_lowering(space: SpaceDescriptor, weights: dict[str, complex]) -> SparseOperator:
    """Collective lowering operator sum_k w_k b_k (e.g. a bright mode)."""
    op = zero_operator(space.dim)
    for mode_id, w in weights.items():
        op = op + ladder(space, mode_id, "lower").scale(w)
    return op


class PureState:
    """Normalized complex state vector on the truncated basis."""

    def __init__(self, vector: np.ndarray, normalize: bool = False):
        v = np.asarray(vector, dtype=np.complex128).ravel()
        if normalize:
            n = np.linalg.norm(v)
            if n == 0:
                raise HilbertError("cannot normalize zero vector")
            v = v / n
        self.vector = v
        self.dim = v.size

    @classmethod
    def basis_state(cls, space: SpaceDescriptor, occupation: Iterable[int]) -> "PureState":
        v = np.zeros(space.dim, dtype=np.complex128)
        v[space.index_of(occupation)] = 1.0
        return cls(v)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def validate(self, tol: float = 1e-10) -> None:
        if abs(self.norm() - 1.0) > tol:
            raise HilbertError(f"pure state norm {self.norm()} deviates from 1 beyond {tol}")

    def density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(np.outer(self.vector, np.conj(self.vector)))


class DensityMatrix:
    """Hermitian positive density matrix with invariant checks."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise HilbertError("density matrix must be square")
        self.matrix = m
        self.dim = m.shape[0]

    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.matrix - self.matrix.conj().T).max())

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.matrix + self.matrix.conj().T) / 2).min())

    def validate(
        self,
        expected_trace: float = 1.0,
        trace_tol: float = 1e-9,
        herm_tol: float = 1e-10,
        positivity_floor: float = -1e-8,
    ) -> None:
        if abs(self.trace() - expected_trace) > trace_tol:
            raise HilbertError(f"trace {self.trace()} deviates from {expected_trace}")
        if self.hermiticity_defect() > herm_tol:
            raise HilbertError(f"hermiticity defect {self.hermiticity_defect():.3e}")
        if self.min_eigenvalue() < positivity_floor:
            raise HilbertError(f"negative eigenvalue {self.min_eigenvalue():.3e}")
