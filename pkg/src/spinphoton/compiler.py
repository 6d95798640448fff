"""Compile target Hamiltonians into layered gate plans.

First-order product formula over local terms, two-body decompositions via
basis-change rotations around a controlled-phase core, the spin-1 to
two-qubit mapping, and Jordan-Wigner hopping circuits for spinless and
spinful Hubbard models (parity CZ chains around an XY block).

Qubit occupation convention for the fermionic mappings: an occupied
orbital is the photon-side logical state |1>, so that a controlled-Z
between the hop endpoint and each interposed qubit realizes the fermionic
parity sign exactly.  Global phases from the decompositions are tracked
symbolically on the plan, never realized physically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .gates import GateOp
from .oracle import PAULI_HALF, embed, gate_sequence_unitary, hubbard_neighbor_pairs

TWO_PI = 2.0 * math.pi


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class OneBody:
    site: int
    axis: str
    coeff: float

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise CompileError("axis must be x, y or z")
        if not np.isfinite(self.coeff):
            raise CompileError("coefficient must be finite")


@dataclass(frozen=True)
class TwoBody:
    site_a: int
    axis_a: str
    site_b: int
    axis_b: str
    coeff: float

    def __post_init__(self):
        if self.site_a == self.site_b:
            raise CompileError("two-body term needs distinct sites")
        for ax in (self.axis_a, self.axis_b):
            if ax not in ("x", "y", "z"):
                raise CompileError("axis must be x, y or z")
        if not np.isfinite(self.coeff):
            raise CompileError("coefficient must be finite")

    @property
    def bond(self) -> tuple[int, int]:
        return tuple(sorted((self.site_a, self.site_b)))


class TargetHamiltonian:
    """Sum of one- and two-body spin-1/2 terms on an n-site register."""

    def __init__(self, n_sites: int, terms: Sequence[OneBody | TwoBody]):
        if n_sites < 1:
            raise CompileError("need at least one site")
        for t in terms:
            sites = (t.site,) if isinstance(t, OneBody) else (t.site_a, t.site_b)
            if any(not (1 <= s <= n_sites) for s in sites):
                raise CompileError(f"term touches a site outside 1..{n_sites}")
        self.n_sites = n_sites
        self.terms = list(terms)

    # -- constructors --------------------------------------------------------

    @classmethod
    def tim(cls, n: int, lam: float, b: float) -> "TargetHamiltonian":
        """Transverse-field Ising chain: lam sum s_z s_z + b sum s_x."""
        terms: list[OneBody | TwoBody] = [
            TwoBody(i, "z", i + 1, "z", lam) for i in range(1, n)
        ]
        terms += [OneBody(i, "x", b) for i in range(1, n + 1)]
        return cls(n, terms)

    @classmethod
    def xy_pair(cls, lam: float) -> "TargetHamiltonian":
        return cls(2, [TwoBody(1, "x", 2, "x", lam), TwoBody(1, "y", 2, "y", lam)])

    @classmethod
    def from_json(cls, doc: dict) -> "TargetHamiltonian":
        terms: list[OneBody | TwoBody] = []
        for t in doc["terms"]:
            if t["kind"] == "one":
                terms.append(OneBody(t["site"], t["axis"], t["coeff"]))
            elif t["kind"] == "two":
                terms.append(
                    TwoBody(t["site_a"], t["axis_a"], t["site_b"], t["axis_b"], t["coeff"])
                )
            else:
                raise CompileError(f"unknown term kind {t['kind']!r}")
        return cls(int(doc["n_sites"]), terms)

    def to_json(self) -> dict:
        out = []
        for t in self.terms:
            if isinstance(t, OneBody):
                out.append({"kind": "one", "site": t.site, "axis": t.axis, "coeff": t.coeff})
            else:
                out.append(
                    {
                        "kind": "two",
                        "site_a": t.site_a,
                        "axis_a": t.axis_a,
                        "site_b": t.site_b,
                        "axis_b": t.axis_b,
                        "coeff": t.coeff,
                    }
                )
        return {"n_sites": self.n_sites, "terms": out}

    # -- dense forms ---------------------------------------------------------

    def term_matrix(self, term: OneBody | TwoBody) -> tuple[tuple[int, ...], np.ndarray]:
        if isinstance(term, OneBody):
            return (term.site,), term.coeff * PAULI_HALF[term.axis]
        local = term.coeff * np.kron(PAULI_HALF[term.axis_a], PAULI_HALF[term.axis_b])
        return (term.site_a, term.site_b), local

    def to_matrix(self) -> np.ndarray:
        h = np.zeros((2**self.n_sites, 2**self.n_sites), dtype=complex)
        for t in self.terms:
            sites, local = self.term_matrix(t)
            h += embed(local, sites, self.n_sites)
        return h

    def ordered_terms(self, one_body_last: bool = True) -> list[OneBody | TwoBody]:
        """Deterministic term order: even bonds, odd bonds, then one-body.

        A chain bond (i, i+1) is 'even' when its left site is odd, matching
        the alternating-bond parallel schedule.  The exact product-formula
        reference uses this same order so the digital error is isolated
        from ordering ambiguity.
        """
        two = [t for t in self.terms if isinstance(t, TwoBody)]
        one = [t for t in self.terms if isinstance(t, OneBody)]
        even = [t for t in two if t.bond[0] % 2 == 1]
        odd = [t for t in two if t.bond[0] % 2 == 0]
        key = lambda t: t.bond
        ordered: list[OneBody | TwoBody] = sorted(even, key=key) + sorted(odd, key=key)
        ones = sorted(one, key=lambda t: t.site)
        return ordered + ones if one_body_last else ones + ordered

    def ordered_term_matrices(self, one_body_last: bool = True):
        return [self.term_matrix(t) for t in self.ordered_terms(one_body_last)]


# ---------------------------------------------------------------------------
# elementary decompositions


_CONJ = {
    # u_alpha with u s_z u^dag = s_alpha; z needs no basis change
    "x": ("y", math.pi / 2),
    "y": ("x", 3 * math.pi / 2),
    "z": None,
}


def _rot(site: int, axis: str, theta: float) -> GateOp:
    theta = theta % TWO_PI
    return GateOp.rotx(site, theta) if axis == "x" else GateOp.roty(site, theta)


def _conj_gates(site: int, axis: str) -> tuple[list[GateOp], list[GateOp], float]:
    """(pre, post, global_phase) realizing u . core . u^dag as a circuit.

    The circuit applies u^dag first and u last; the inverse rotation
    R(-theta) is realized as R(2pi - theta), contributing a global phase pi.
    """
    spec = _CONJ[axis]
    if spec is None:
        return [], [], 0.0
    rot_axis, theta = spec
    pre = [_rot(site, rot_axis, (TWO_PI - theta) % TWO_PI)]
    post = [_rot(site, rot_axis, theta)]
    return pre, post, math.pi


def decompose_two_body(term: TwoBody, tau: float) -> tuple[list[list[GateOp]], float]:
    """Gate layers for exp(-i coeff s_a s_b tau), plus the global phase.

    The zz core is a controlled phase flanked by single-qubit phase gates,
    exp(-i phi szsz) = [Phi(-phi/2) x Phi(-phi/2)] U_Cphi(phi) up to the
    tracked global phase; other axis pairs conjugate the core with the
    appropriate pi/2 rotations.
    """
    phi = term.coeff * tau
    if abs(phi) < 1e-15:
        return [], 0.0
    pre_a, post_a, g_a = _conj_gates(term.site_a, term.axis_a)
    pre_b, post_b, g_b = _conj_gates(term.site_b, term.axis_b)
    phi_wrapped = math.remainder(phi, TWO_PI)
    layers: list[list[GateOp]] = []
    if pre_a or pre_b:
        layers.append(pre_a + pre_b)
    layers.append(
        [
            GateOp.phase(term.site_a, math.remainder(-phi_wrapped / 2, TWO_PI)),
            GateOp.phase(term.site_b, math.remainder(-phi_wrapped / 2, TWO_PI)),
        ]
    )
    layers.append([GateOp.cphase(term.site_a, term.site_b, phi_wrapped)])
    if post_a or post_b:
        layers.append(post_a + post_b)
    # zz identity leaves e^{+i phi/4} relative to the bare gate product
    return layers, -phi / 4.0 + g_a + g_b


def decompose_one_body(term: OneBody, tau: float) -> tuple[list[list[GateOp]], float]:
    angle = term.coeff * tau
    if abs(angle) < 1e-15:
        return [], 0.0
    if term.axis == "z":
        phi = math.remainder(-angle, TWO_PI)
        return [[GateOp.phase(term.site, phi)]], -angle / 2.0
    # R(theta + 2pi k) = (-1)^k R(theta): wrap into [0, 2pi), track the sign
    theta = angle % TWO_PI
    wraps = math.floor(angle / TWO_PI)
    return [[_rot(term.site, term.axis, theta)]], math.pi * wraps


@dataclass
class TrotterPlan:
    """Layered first-order product-formula realization of exp(-i H t)."""

    n_sites: int
    n: int
    tau: float
    step_layers: list[list[GateOp]]
    global_phase_per_step: float
    provenance: list[tuple[object, list[GateOp]]] = field(default_factory=list)

    def layers(self) -> list[list[GateOp]]:
        return self.step_layers * self.n

    def gate_count(self) -> int:
        return sum(len(l) for l in self.step_layers) * self.n

    def step_unitary(self) -> np.ndarray:
        """Gate-ideal matrix of one step, including the tracked phase."""
        seq = [g for layer in self.step_layers for g in layer]
        return np.exp(1j * self.global_phase_per_step) * gate_sequence_unitary(
            seq, self.n_sites
        )

    def to_json(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "n": self.n,
            "tau": self.tau,
            "global_phase_per_step": self.global_phase_per_step,
            "layers": [[g.to_json() for g in layer] for layer in self.step_layers],
        }


def _merge_parallel(layer_groups: list[list[list[GateOp]]]) -> list[list[GateOp]]:
    """Zip per-term sub-layer lists of support-disjoint terms into layers."""
    depth = max((len(g) for g in layer_groups), default=0)
    out = []
    for k in range(depth):
        layer = []
        for g in layer_groups:
            if k < len(g):
                layer.extend(g[k])
        if layer:
            out.append(layer)
    return out


def trotterize(
    target: TargetHamiltonian,
    t: float,
    n: int,
    one_body_last: bool = True,
) -> TrotterPlan:
    """First-order Trotter plan with alternating-bond parallel layers.

    Two-body terms on disjoint supports within the even (odd) bond group
    run in the same layers; one-body terms on distinct sites share one
    layer.  Term order matches ``ordered_terms``.
    """
    if n < 1:
        raise CompileError("need at least one step")
    if not target.terms:
        raise CompileError("empty target Hamiltonian")
    tau = t / n
    ordered = target.ordered_terms(one_body_last)
    two = [t_ for t_ in ordered if isinstance(t_, TwoBody)]
    even = [t_ for t_ in two if t_.bond[0] % 2 == 1]
    odd = [t_ for t_ in two if t_.bond[0] % 2 == 0]
    ones = [t_ for t_ in ordered if isinstance(t_, OneBody)]

    step_layers: list[list[GateOp]] = []
    gphase = 0.0
    provenance: list[tuple[object, list[GateOp]]] = []

    def emit_group(terms):
        nonlocal gphase
        groups = []
        for term in terms:
            layers, g = decompose_two_body(term, tau)
            gphase += g
            groups.append(layers)
            provenance.append((term, [op for l in layers for op in l]))
        step_layers.extend(_merge_parallel(groups))

    def emit_ones(terms):
        nonlocal gphase
        groups = []
        for term in terms:
            layers, g = decompose_one_body(term, tau)
            gphase += g
            groups.append(layers)
            provenance.append((term, [op for l in layers for op in l]))
        step_layers.extend(_merge_parallel(groups))

    if one_body_last:
        emit_group(even)
        emit_group(odd)
        emit_ones(ones)
    else:
        emit_ones(ones)
        emit_group(even)
        emit_group(odd)
    return TrotterPlan(target.n_sites, n, tau, step_layers, gphase, provenance)


# ---------------------------------------------------------------------------
# spin-1 mapping


@dataclass(frozen=True)
class Spin1Chain:
    """Chain of spin-1 sites with exchange lam and anisotropies D, E."""

    length: int
    lam: float
    d_aniso: float
    e_aniso: float


def map_spin1(chain: Spin1Chain) -> TargetHamiltonian:
    """Each spin-1 becomes a qubit pair A, B with S = s_A + s_B.

    Requires the pairs initialized in the triplet sector.  The single-site
    anisotropy reduces to 2D szsz + 2E (sxsx - syy) on the pair, dropping
    a constant.
    """
    terms: list[OneBody | TwoBody] = []
    for i in range(chain.length):
        a, b = 2 * i + 1, 2 * i + 2
        if chain.d_aniso:
            terms.append(TwoBody(a, "z", b, "z", 2 * chain.d_aniso))
        if chain.e_aniso:
            terms.append(TwoBody(a, "x", b, "x", 2 * chain.e_aniso))
            terms.append(TwoBody(a, "y", b, "y", -2 * chain.e_aniso))
    for i in range(chain.length - 1):
        a1, b1 = 2 * i + 1, 2 * i + 2
        a2, b2 = 2 * i + 3, 2 * i + 4
        for axis in ("x", "y", "z"):
            for s1 in (a1, b1):
                for s2 in (a2, b2):
                    terms.append(TwoBody(s1, axis, s2, axis, chain.lam))
    return TargetHamiltonian(2 * chain.length, terms)


# ---------------------------------------------------------------------------
# Jordan-Wigner circuits


@dataclass(frozen=True)
class HopCircuit:
    """One nearest-neighbor hopping term compiled to gates.

    ``cz_partners`` are the qubits interposed (in the chosen orbital
    ordering) between the two hop endpoints; a CZ between the first
    endpoint and each partner brackets the XY block and realizes the
    fermionic parity sign.
    """

    qubit_a: int
    qubit_b: int
    cz_partners: tuple[int, ...]
    lam: float

    def gate_layers(self, tau: float) -> list[list[GateOp]]:
        layers = [[GateOp.cz(self.qubit_a, g)] for g in self.cz_partners]
        xy_1, g1 = decompose_two_body(TwoBody(self.qubit_a, "x", self.qubit_b, "x", -2 * self.lam), tau)
        xy_2, g2 = decompose_two_body(TwoBody(self.qubit_a, "y", self.qubit_b, "y", -2 * self.lam), tau)
        closing = [[GateOp.cz(self.qubit_a, g)] for g in reversed(self.cz_partners)]
        return layers + xy_1 + xy_2 + closing

    def global_phase(self, tau: float) -> float:
        _, g1 = decompose_two_body(TwoBody(self.qubit_a, "x", self.qubit_b, "x", -2 * self.lam), tau)
        _, g2 = decompose_two_body(TwoBody(self.qubit_a, "y", self.qubit_b, "y", -2 * self.lam), tau)
        return g1 + g2


def jw_spinless(n_rows: int, n_cols: int, lam: float) -> list[HopCircuit]:
    """Hopping circuits for spinless fermions on an N x M lattice.

    Orbitals are ordered row-major; horizontal hops (nu = mu + 1) carry an
    empty CZ chain, vertical hops (nu = mu + M) one CZ per interposed
    orbital.
    """
    out = []
    for mu, nu in hubbard_neighbor_pairs(n_rows, n_cols):
        partners = tuple(range(mu + 2, nu + 1))  # 1-based qubits mu+1..nu-1
        out.append(HopCircuit(mu + 1, nu + 1, partners, lam))
    return out


def jw_spinful(
    n_rows: int, n_cols: int, lam: float, u: float
) -> tuple[list[HopCircuit], TargetHamiltonian]:
    """Spinful mapping: site mu uses qubits (2mu-1) for up, (2mu) for down.

    Hops connect same-species qubits; the parity CZ chain runs over the
    same-species interposed qubits and only vertical hops need it (for
    horizontal neighbors the phase factor cancels).  The on-site repulsion
    compiles to a zz term plus single-qubit phases; the constant NMU/4 is
    tracked by the caller as a global phase.
    """
    hops = []
    for mu, nu in hubbard_neighbor_pairs(n_rows, n_cols):
        vertical = (nu - mu) == n_cols and n_cols >= 1 and (nu - mu) != 1
        for spin_offset in (0, 1):  # 0: up (odd qubits), 1: down (even)
            qa = 2 * mu + 1 + spin_offset
            qb = 2 * nu + 1 + spin_offset
            if vertical:
                partners = tuple(2 * g + 1 + spin_offset for g in range(mu + 1, nu))
            else:
                partners = ()
            hops.append(HopCircuit(qa, qb, partners, lam))
    terms: list[OneBody | TwoBody] = []
    n_sites = n_rows * n_cols
    for mu in range(n_sites):
        up, down = 2 * mu + 1, 2 * mu + 2
        terms.append(TwoBody(up, "z", down, "z", u))
        terms.append(OneBody(up, "z", -u / 2))
        terms.append(OneBody(down, "z", -u / 2))
    return hops, TargetHamiltonian(2 * n_sites, terms)


def _z_string_factor(n_qubits: int, sites: Iterable[int]) -> np.ndarray:
    """Diagonal (-1)^{sum n_gamma}; the occupied orbital is |1>."""
    diag = np.ones(2**n_qubits)
    for s in sites:
        bit = np.array(
            [((b >> (n_qubits - s)) & 1) for b in range(2**n_qubits)]
        )
        diag = diag * np.where(bit == 1, -1.0, 1.0)
    return diag


def compiled_spin_hamiltonian(
    n_rows: int, n_cols: int, lam: float, u: float = 0.0, spinful: bool = False
) -> np.ndarray:
    """Dense matrix of the Jordan-Wigner-compiled spin Hamiltonian.

    This is the effective model the gate circuits simulate: hopping terms
    with explicit parity strings plus (spinful) on-site zz and field terms
    and the NMU/4 constant.
    """
    sp = np.array([[0, 0], [1, 0]], dtype=complex)  # creates occupation: |1><0|
    n_sites = n_rows * n_cols
    if not spinful:
        n_q = n_sites
        h = np.zeros((2**n_q, 2**n_q), dtype=complex)
        for mu, nu in hubbard_neighbor_pairs(n_rows, n_cols):
            qa, qb = mu + 1, nu + 1
            hop = embed(sp, (qa,), n_q) @ embed(sp.conj().T, (qb,), n_q)
            string = _z_string_factor(n_q, range(mu + 2, nu + 1))
            term = -lam * (string[:, None] * hop)
            h += term + term.conj().T
        return h
    n_q = 2 * n_sites
    h = np.zeros((2**n_q, 2**n_q), dtype=complex)
    for mu, nu in hubbard_neighbor_pairs(n_rows, n_cols):
        vertical = (nu - mu) != 1
        for spin_offset in (0, 1):
            qa = 2 * mu + 1 + spin_offset
            qb = 2 * nu + 1 + spin_offset
            hop = embed(sp, (qa,), n_q) @ embed(sp.conj().T, (qb,), n_q)
            if vertical:
                string = _z_string_factor(
                    n_q, (2 * g + 1 + spin_offset for g in range(mu + 1, nu))
                )
                hop = string[:, None] * hop
            term = -lam * hop
            h += term + term.conj().T
    sz = PAULI_HALF["z"]
    for mu in range(n_sites):
        up, down = 2 * mu + 1, 2 * mu + 2
        h += u * embed(np.kron(sz, sz), (up, down), n_q)
        h -= (u / 2) * (embed(sz, (up,), n_q) + embed(sz, (down,), n_q))
    h += (n_sites * u / 4) * np.eye(2**n_q)
    return h


def hubbard_trotter_plan(
    n_rows: int, n_cols: int, lam: float, t: float, n: int, u: float = 0.0, spinful: bool = False
) -> TrotterPlan:
    """Trotter plan over the Jordan-Wigner hopping circuits (plus U terms)."""
    if spinful:
        hops, uterms = jw_spinful(n_rows, n_cols, lam, u)
        n_q = 2 * n_rows * n_cols
    else:
        hops = jw_spinless(n_rows, n_cols, lam)
        uterms = None
        n_q = n_rows * n_cols
    tau = t / n
    step_layers: list[list[GateOp]] = []
    gphase = 0.0
    prov = []
    for hop in hops:
        layers = hop.gate_layers(tau)
        step_layers.extend(layers)
        gphase += hop.global_phase(tau)
        prov.append((hop, [g for l in layers for g in l]))
    if uterms is not None and abs(u) > 0:
        for term in uterms.ordered_terms():
            if isinstance(term, TwoBody):
                layers, g = decompose_two_body(term, tau)
            else:
                layers, g = decompose_one_body(term, tau)
            step_layers.extend(layers)
            gphase += g
            prov.append((term, [gg for l in layers for gg in l]))
        gphase += -(n_rows * n_cols) * u * tau / 4.0
    return TrotterPlan(n_q, n, tau, step_layers, gphase, prov)
