import math

import numpy as np
import pytest
import scipy.linalg

from spinphoton.compiler import (
    CompileError,
    HopCircuit,
    OneBody,
    Spin1Chain,
    TargetHamiltonian,
    TwoBody,
    compiled_spin_hamiltonian,
    decompose_one_body,
    decompose_two_body,
    hubbard_trotter_plan,
    jw_spinless,
    jw_spinful,
    map_spin1,
    trotterize,
)
from spinphoton.oracle import (
    PAULI_HALF,
    embed,
    exact_evolution,
    exact_trotter,
    fermion_brute_force,
    gate_sequence_unitary,
    single_particle_propagator,
    spin1_hamiltonian,
    S1Z,
)


def layers_unitary(layers, n_sites, phase=0.0):
    seq = [g for layer in layers for g in layer]
    return np.exp(1j * phase) * gate_sequence_unitary(seq, n_sites)


def term_exponential(term, tau, n_sites):
    if isinstance(term, OneBody):
        local = term.coeff * PAULI_HALF[term.axis]
        sites = (term.site,)
    else:
        local = term.coeff * np.kron(PAULI_HALF[term.axis_a], PAULI_HALF[term.axis_b])
        sites = (term.site_a, term.site_b)
    return embed(scipy.linalg.expm(-1j * local * tau), sites, n_sites)


@pytest.mark.parametrize("axes", ["zz", "xx", "yy", "yz", "zy", "xy", "yx", "xz", "zx"])
def test_decompose_two_body_all_axis_pairs(axes):
    lam, tau = 1.7, math.pi / 2 / 1.7
    term = TwoBody(1, axes[0], 2, axes[1], lam)
    layers, phase = decompose_two_body(term, tau)
    u = layers_unitary(layers, 2, phase)
    assert np.abs(u - term_exponential(term, tau, 2)).max() < 1e-12


def test_decompose_two_body_zero_and_negative():
    assert decompose_two_body(TwoBody(1, "z", 2, "z", 0.0), 1.0) == ([], 0.0)
    term = TwoBody(1, "z", 2, "z", -2.3)
    layers, phase = decompose_two_body(term, 0.8)
    u = layers_unitary(layers, 2, phase)
    assert np.abs(u - term_exponential(term, 0.8, 2)).max() < 1e-12


def test_decompose_two_body_zz_specific():
    # lam*tau = pi/2 gives [Phi(-pi/4) x Phi(-pi/4)] C-phi(pi/2)
    term = TwoBody(1, "z", 2, "z", 1.0)
    layers, phase = decompose_two_body(term, math.pi / 2)
    flat = [g for l in layers for g in l]
    kinds = [g.kind for g in flat]
    assert kinds == ["phase", "phase", "cphase"]
    assert flat[0].angle == pytest.approx(-math.pi / 4)
    assert flat[2].angle == pytest.approx(math.pi / 2)


@pytest.mark.parametrize("axis,coeff", [("x", 0.9), ("y", -1.2), ("z", 0.7), ("z", -0.5)])
def test_decompose_one_body(axis, coeff):
    term = OneBody(1, axis, coeff)
    layers, phase = decompose_one_body(term, 1.1)
    u = layers_unitary(layers, 1, phase)
    assert np.abs(u - term_exponential(term, 1.1, 1)).max() < 1e-12


def test_trotterize_single_term_is_exact():
    target = TargetHamiltonian(2, [TwoBody(1, "z", 2, "z", 1.3)])
    plan = trotterize(target, 2.0, 4)
    step = plan.step_unitary()
    exact = term_exponential(target.terms[0], 0.5, 2)
    assert np.abs(step - exact).max() < 1e-12


def test_trotter_step_matches_exact_product():
    # gate-ideal product over one step == ordered product of exponentials
    target = TargetHamiltonian.tim(3, 1.0, 0.5)
    plan = trotterize(target, 2.0, 5)
    tau = plan.tau
    u_gates = plan.step_unitary()
    u_exact = np.eye(8, dtype=complex)
    for term in target.ordered_terms():
        u_exact = term_exponential(term, tau, 3) @ u_exact
    assert np.abs(u_gates - u_exact).max() < 1e-9


def test_trotterize_tim_matches_oracle_state():
    target = TargetHamiltonian.tim(3, 1.0, 0.5)
    plan = trotterize(target, 5.0, 10)
    psi0 = np.zeros(8, dtype=complex)
    psi0[7] = 1.0
    psi_gates = psi0.copy()
    step = plan.step_unitary()
    for _ in range(plan.n):
        psi_gates = step @ psi_gates
    psi_ref = exact_trotter(target.ordered_term_matrices(), 3, psi0, 5.0, 10)
    assert np.abs(psi_gates - psi_ref).max() < 1e-10


def test_digital_error_halves_with_doubled_steps():
    target = TargetHamiltonian.tim(3, 1.0, 0.5)
    h = target.to_matrix()
    psi0 = np.zeros(8, dtype=complex)
    psi0[7] = 1.0
    exact = exact_evolution(h, psi0, [4.0])[0]
    errs = []
    for n in (8, 16, 32):
        psi = exact_trotter(target.ordered_term_matrices(), 3, psi0, 4.0, n)
        errs.append(np.linalg.norm(psi - exact))
    assert errs[0] > errs[1] > errs[2]
    for r in (errs[0] / errs[1], errs[1] / errs[2]):
        assert 1.6 <= r <= 2.4


def test_layering_preserves_semantics():
    target = TargetHamiltonian.tim(4, 0.8, 0.4)
    plan = trotterize(target, 1.0, 1)
    layered = plan.step_unitary()
    sequential = np.exp(1j * plan.global_phase_per_step) * gate_sequence_unitary(
        [g for layer in plan.step_layers for g in layer], 4
    )
    assert np.abs(layered - sequential).max() < 1e-10
    # within a layer all supports disjoint
    for layer in plan.step_layers:
        seen = set()
        for g in layer:
            assert not (seen & set(g.qubits))
            seen |= set(g.qubits)


def test_trotterize_validations():
    with pytest.raises(CompileError):
        trotterize(TargetHamiltonian(2, []), 1.0, 2)
    with pytest.raises(CompileError):
        trotterize(TargetHamiltonian.tim(2, 1, 1), 1.0, 0)


def test_map_spin1_single_site():
    chain = Spin1Chain(1, 0.0, -2.0, 0.5)
    mapped = map_spin1(chain)
    kinds = {(t.axis_a, t.axis_b, t.coeff) for t in mapped.terms}
    assert kinds == {("z", "z", -4.0), ("x", "x", 1.0), ("y", "y", -1.0)}


def test_map_spin1_e_zero_conserves_sz():
    mapped = map_spin1(Spin1Chain(1, 0.0, 1.5, 0.0))
    h = mapped.to_matrix()
    sz_tot = embed(PAULI_HALF["z"], (1,), 2) + embed(PAULI_HALF["z"], (2,), 2)
    assert np.abs(h @ sz_tot - sz_tot @ h).max() < 1e-12


def test_map_spin1_triplet_dynamics_match():
    # two-qubit dynamics in the triplet sector == exact spin-1 evolution
    d_aniso, e_aniso = -12.0, 1.0
    mapped = map_spin1(Spin1Chain(1, 0.0, d_aniso, e_aniso))
    h2 = mapped.to_matrix()
    h1 = spin1_hamiltonian(d_aniso, e_aniso)
    # triplet basis |S=1, m>: m=+1 -> |00>, m=0 -> (|01>+|10>)/sqrt2, m=-1 -> |11>
    t = np.zeros((4, 3), dtype=complex)
    t[0, 0] = 1.0
    t[1, 1] = t[2, 1] = 1 / math.sqrt(2)
    t[3, 2] = 1.0
    psi0 = np.array([0, 0, 1.0], dtype=complex)  # m = -1
    tgrid = np.linspace(0, math.pi / e_aniso, 40)
    exact = exact_evolution(h1, psi0, tgrid)
    mapped_states = exact_evolution(h2, t @ psi0, tgrid)
    sz1 = np.real(np.einsum("ti,ij,tj->t", exact.conj(), S1Z, exact))
    sz_tot = embed(PAULI_HALF["z"], (1,), 2) + embed(PAULI_HALF["z"], (2,), 2)
    sz2 = np.real(np.einsum("ti,ij,tj->t", mapped_states.conj(), sz_tot, mapped_states))
    # identical up to the dropped constant (pure phase)
    assert np.abs(sz1 - sz2).max() < 1e-10


def test_jw_spinless_chains():
    # 1D chain: nearest-neighbor hops carry no CZ chain
    hops = jw_spinless(1, 4, 1.0)
    assert all(h.cz_partners == () for h in hops)
    # 2D, M = 4: hop 1 -> 5 is bracketed by CZ on (1,2), (1,3), (1,4)
    hops = jw_spinless(2, 4, 1.0)
    vert = [h for h in hops if (h.qubit_a, h.qubit_b) == (1, 5)][0]
    assert vert.cz_partners == (2, 3, 4)
    layers = vert.gate_layers(0.3)
    kinds = [g.kind for layer in layers for g in layer]
    assert kinds[:3] == ["cphase"] * 3 and kinds[-3:] == ["cphase"] * 3


def test_jw_spinless_spectra_match_fermions():
    lam = 0.8
    for rows, cols in [(1, 2), (1, 3), (2, 2), (2, 3)]:
        spin_h = compiled_spin_hamiltonian(rows, cols, lam)
        ferm = fermion_brute_force(rows, cols, lam)
        assert np.allclose(
            np.linalg.eigvalsh(spin_h), np.sort(ferm.spectrum()), atol=1e-10
        )


def test_jw_spinful_structure():
    hops, uterms = jw_spinful(2, 2, 1.0, 3.0)
    # horizontal hops (within a row) carry no CZ chain
    horiz = [h for h in hops if abs(h.qubit_b - h.qubit_a) == 2]
    assert all(h.cz_partners == () for h in horiz)
    # vertical hops chain over same-species interposed qubits only
    vert = [h for h in hops if abs(h.qubit_b - h.qubit_a) == 4]
    for h in vert:
        assert all((p - h.qubit_a) % 2 == 0 for p in h.cz_partners)
    # on-site U: zz + two single-qubit z terms per site
    per_site = [t for t in uterms.terms if isinstance(t, TwoBody)]
    assert len(per_site) == 4
    assert all(t.coeff == 3.0 for t in per_site)
    ones = [t for t in uterms.terms if isinstance(t, OneBody)]
    assert len(ones) == 8 and all(t.coeff == -1.5 for t in ones)


def test_jw_spinful_spectra_match_fermions():
    lam, u = 0.7, 1.9
    for rows, cols in [(1, 2), (2, 2)]:
        spin_h = compiled_spin_hamiltonian(rows, cols, lam, u, spinful=True)
        ferm = fermion_brute_force(rows, cols, lam, u, spinful=True)
        assert np.allclose(
            np.linalg.eigvalsh(spin_h), np.sort(ferm.spectrum()), atol=1e-10
        )


def test_hubbard_circuit_single_particle_dynamics():
    # compiled circuit evolution vs the fermionic single-particle propagator
    lam, t_total = 1.0, 1.2
    n = 1500  # first-order splitting error must drop below 1e-3
    plan = hubbard_trotter_plan(2, 2, lam, t_total, n)
    step = plan.step_unitary()
    u_total = np.linalg.matrix_power(step, n)
    # single fermion at site k <-> qubit k in the occupied (|1>) state
    n_q = 4
    prop = single_particle_propagator(2, 2, lam, t_total)
    for k in range(n_q):
        col = 1 << (n_q - 1 - k)
        out = u_total[:, col]
        for j in range(n_q):
            row = 1 << (n_q - 1 - j)
            assert abs(abs(out[row]) - abs(prop[j, k])) < 1e-3


def test_hamiltonian_json_roundtrip():
    target = TargetHamiltonian.tim(3, 1.0, 0.5)
    again = TargetHamiltonian.from_json(target.to_json())
    assert np.allclose(target.to_matrix(), again.to_matrix())
