"""Independent ground-truth engines for validation.

Exact target-model evolution by eigendecomposition, exact gate-level
product-formula evolution with dense local exponentials, fermionic
brute-force diagonalization on occupation bitstrings, and the ideal gate
matrices.  Everything here is deliberately decoupled from the pulse-level
machinery: these references validate it, they never reuse it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .gates import CPHASE, CZ, PHASE, RETRIEVE, ROTX, ROTY, STORE, GateOp

SX = np.array([[0.0, 0.5], [0.5, 0.0]], dtype=complex)
SY = np.array([[0.0, -0.5j], [0.5j, 0.0]], dtype=complex)
SZ = np.array([[0.5, 0.0], [0.0, -0.5]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
PAULI_HALF = {"x": SX, "y": SY, "z": SZ}

# spin-1 operators in the (m=+1, 0, -1) basis
S1Z = np.diag([1.0, 0.0, -1.0]).astype(complex)
S1X = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / math.sqrt(2)
S1Y = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / math.sqrt(2)


class OracleError(ValueError):
    pass


def embed(local: np.ndarray, sites: tuple[int, ...], n: int) -> np.ndarray:
    """Embed a k-site operator into the 2^n register (qubit 1 = MSB)."""
    full_sites = list(sites)
    dim_local = local.shape[0]
    if dim_local != 2 ** len(full_sites):
        raise OracleError("local operator size does not match its site count")
    ops = []
    consumed = 0
    # build as an n-fold kron with the local operator spread over its sites;
    # general permutation handled by index arithmetic
    out = np.zeros((2**n, 2**n), dtype=complex)
    others = [s for s in range(1, n + 1) if s not in full_sites]
    for row_loc in range(dim_local):
        for col_loc in range(dim_local):
            val = local[row_loc, col_loc]
            if val == 0:
                continue
            for rest in range(2 ** len(others)):
                row = col = 0
                for k, s in enumerate(full_sites):
                    bit_r = (row_loc >> (len(full_sites) - 1 - k)) & 1
                    bit_c = (col_loc >> (len(full_sites) - 1 - k)) & 1
                    row |= bit_r << (n - s)
                    col |= bit_c << (n - s)
                for k, s in enumerate(others):
                    bit = (rest >> (len(others) - 1 - k)) & 1
                    row |= bit << (n - s)
                    col |= bit << (n - s)
                out[row, col] += val
    return out


def check_hermitian(h: np.ndarray, tol: float = 1e-12) -> None:
    if np.abs(h - h.conj().T).max() > tol * max(1.0, np.abs(h).max()):
        raise OracleError("Hamiltonian is not Hermitian")


def exact_evolution(h: np.ndarray, psi0: np.ndarray, t_grid) -> np.ndarray:
    """psi(t) = e^{-iHt} psi0 on a grid, via one eigendecomposition."""
    h = np.asarray(h, dtype=complex)
    if h.shape[0] > 4096:
        raise OracleError("exact evolution capped at dim 4096")
    check_hermitian(h)
    vals, vecs = np.linalg.eigh(h)
    amps = vecs.conj().T @ np.asarray(psi0, dtype=complex)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    out = np.empty((t_grid.size, h.shape[0]), dtype=complex)
    for i, t in enumerate(t_grid):
        out[i] = vecs @ (np.exp(-1j * vals * t) * amps)
    return out


def exact_trotter(
    terms: list[tuple[tuple[int, ...], np.ndarray]],
    n_qubits: int,
    psi0: np.ndarray,
    t: float,
    n: int,
) -> np.ndarray:
    """First-order product formula with exact local exponentials.

    ``terms`` is the ordered list of (sites, local Hermitian matrix); one
    step applies exp(-i H_k tau) in list order, repeated n times.
    """
    tau = t / n
    step = np.eye(2**n_qubits, dtype=complex)
    for sites, local in terms:
        check_hermitian(np.asarray(local, dtype=complex))
        vals, vecs = np.linalg.eigh(local)
        u_loc = (vecs * np.exp(-1j * vals * tau)[None, :]) @ vecs.conj().T
        step = embed(u_loc, sites, n_qubits) @ step
    psi = np.asarray(psi0, dtype=complex)
    for _ in range(n):
        psi = step @ psi
    return psi


def exact_trotter_states(terms, n_qubits, psi0, t, n) -> np.ndarray:
    """All intermediate states after each of the n steps (row 0 = psi0)."""
    tau = t / n
    step = np.eye(2**n_qubits, dtype=complex)
    for sites, local in terms:
        vals, vecs = np.linalg.eigh(np.asarray(local, dtype=complex))
        u_loc = (vecs * np.exp(-1j * vals * tau)[None, :]) @ vecs.conj().T
        step = embed(u_loc, sites, n_qubits) @ step
    out = [np.asarray(psi0, dtype=complex)]
    for _ in range(n):
        out.append(step @ out[-1])
    return np.array(out)


# ---------------------------------------------------------------------------
# fermions


@dataclass
class ExactModel:
    """Dense Hamiltonian on a labeled basis (qubit register or fermion Fock)."""

    hamiltonian: np.ndarray
    labels: list
    meta: dict

    def spectrum(self) -> np.ndarray:
        check_hermitian(self.hamiltonian, 1e-12)
        return np.linalg.eigvalsh(self.hamiltonian)

    def propagator(self, t: float) -> np.ndarray:
        vals, vecs = np.linalg.eigh(self.hamiltonian)
        return (vecs * np.exp(-1j * vals * t)[None, :]) @ vecs.conj().T

    def sector_indices(self, n_particles: int) -> np.ndarray:
        occ = np.array([bin(b).count("1") for b in range(len(self.labels))])
        return np.nonzero(occ == n_particles)[0]


def _fermion_ops(n_modes: int):
    """Annihilation operators with Jordan-Wigner signs on bitstrings.

    Mode k occupies bit (n_modes-1-k) so that mode 0 is the leftmost; the
    sign of c_k is (-1)^(number of occupied modes with index < k).
    """
    dim = 2**n_modes
    ops = []
    for k in range(n_modes):
        rows, cols, vals = [], [], []
        bit = n_modes - 1 - k
        for b in range(dim):
            if (b >> bit) & 1:
                before = sum((b >> (n_modes - 1 - j)) & 1 for j in range(k))
                rows.append(b & ~(1 << bit))
                cols.append(b)
                vals.append((-1.0) ** before)
        op = np.zeros((dim, dim), dtype=complex)
        op[rows, cols] = vals
        ops.append(op)
    return ops


def hubbard_neighbor_pairs(n_rows: int, n_cols: int) -> list[tuple[int, int]]:
    """Nearest-neighbor (mu, nu) site pairs, row-major 0-based, mu < nu."""
    pairs = []
    for r in range(n_rows):
        for c in range(n_cols):
            mu = r * n_cols + c
            if c + 1 < n_cols:
                pairs.append((mu, mu + 1))
            if r + 1 < n_rows:
                pairs.append((mu, mu + n_cols))
    return pairs


def fermion_brute_force(
    n_rows: int,
    n_cols: int,
    lam: float,
    u: float = 0.0,
    spinful: bool = False,
) -> ExactModel:
    """Hubbard Hamiltonian on occupation bitstrings with exact signs.

    Spinless: one mode per site, row-major order.  Spinful: modes ordered
    [down(site 0..NM-1), up(site 0..NM-1)]; the interaction couples the up
    and down occupations of each site.
    """
    n_sites = n_rows * n_cols
    if spinful and n_sites > 4:
        raise OracleError("spinful brute force capped at 4 sites")
    if not spinful and n_sites > 6:
        raise OracleError("spinless brute force capped at 6 sites")
    pairs = hubbard_neighbor_pairs(n_rows, n_cols)
    if spinful:
        n_modes = 2 * n_sites
        c = _fermion_ops(n_modes)
        down = c[:n_sites]
        up = c[n_sites:]
        h = np.zeros((2**n_modes, 2**n_modes), dtype=complex)
        for mu, nu in pairs:
            for ops in (up, down):
                h -= lam * (ops[mu].conj().T @ ops[nu] + ops[nu].conj().T @ ops[mu])
        for mu in range(n_sites):
            n_up = up[mu].conj().T @ up[mu]
            n_dn = down[mu].conj().T @ down[mu]
            h += u * (n_up @ n_dn)
        labels = list(range(2**n_modes))
        return ExactModel(h, labels, {"spinful": True, "n_sites": n_sites})
    c = _fermion_ops(n_sites)
    h = np.zeros((2**n_sites, 2**n_sites), dtype=complex)
    for mu, nu in pairs:
        h -= lam * (c[mu].conj().T @ c[nu] + c[nu].conj().T @ c[mu])
    return ExactModel(h, list(range(2**n_sites)), {"spinful": False, "n_sites": n_sites})


def single_particle_propagator(n_rows: int, n_cols: int, lam: float, t: float) -> np.ndarray:
    """e^{-iHt} restricted to the one-fermion sector, indexed by site."""
    n_sites = n_rows * n_cols
    h1 = np.zeros((n_sites, n_sites), dtype=complex)
    for mu, nu in hubbard_neighbor_pairs(n_rows, n_cols):
        h1[mu, nu] = h1[nu, mu] = -lam
    vals, vecs = np.linalg.eigh(h1)
    return (vecs * np.exp(-1j * vals * t)[None, :]) @ vecs.conj().T


# ---------------------------------------------------------------------------
# ideal gates


def rotation_matrix(axis: str, theta: float) -> np.ndarray:
    half = theta / 2.0
    c, s = math.cos(half), math.sin(half)
    if axis == "x":
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
    if axis == "y":
        return np.array([[c, -s], [s, c]], dtype=complex)
    raise OracleError("axis must be x or y")


def phase_matrix(phi: float) -> np.ndarray:
    return np.diag([1.0, np.exp(-1j * phi)]).astype(complex)


def cphase_matrix(phi: float) -> np.ndarray:
    return np.diag([1.0, 1.0, 1.0, np.exp(-1j * phi)]).astype(complex)


def ideal_gate_matrix(op: GateOp) -> np.ndarray:
    """Exact 2x2 / 4x4 unitaries for process-fidelity comparison."""
    if op.kind == PHASE:
        return phase_matrix(op.angle)
    if op.kind == ROTX:
        return rotation_matrix("x", op.angle)
    if op.kind == ROTY:
        return rotation_matrix("y", op.angle)
    if op.kind == CPHASE:
        return cphase_matrix(op.angle)
    if op.kind == CZ:
        return cphase_matrix(math.pi)
    if op.kind in (STORE, RETRIEVE):
        return np.eye(2, dtype=complex)
    raise OracleError(f"no ideal matrix for {op.kind}")


def gate_sequence_unitary(gates: list[GateOp], n_qubits: int) -> np.ndarray:
    """Product of ideal gate matrices, applied in list (time) order."""
    u = np.eye(2**n_qubits, dtype=complex)
    for g in gates:
        u = embed(ideal_gate_matrix(g), g.qubits, n_qubits) @ u
    return u


def spin1_hamiltonian(d_aniso: float, e_aniso: float) -> np.ndarray:
    """Single spin-1 with axial and rhombic anisotropy: D Sz^2 + E (Sx^2 - Sy^2)."""
    return d_aniso * S1Z @ S1Z + e_aniso * (S1X @ S1X - S1Y @ S1Y)
