import math

import numpy as np
import pytest

from spinphoton.device import (
    TWO_PI,
    BathAttachment,
    DeviceError,
    DeviceModel,
    DeviceSpec,
    PulseSchedule,
    PulseSegment,
    Topology,
    build_cell,
    build_space,
    detuning,
    device_preset,
    hamiltonian_at,
    jump_operators,
)
from spinphoton.hilbert import total_excitation_op


@pytest.fixture(scope="module")
def highband():
    return device_preset("highband")


def test_preset_values(highband):
    assert highband.omega_m1 == pytest.approx(TWO_PI * 35e9)
    assert highband.Gbar_m1 == pytest.approx(TWO_PI * 40e6)
    assert highband.kappa == pytest.approx(TWO_PI * 30e6)
    prot = device_preset("protected")
    # working detuning Delta = 6 Gbar in the protected preset
    assert prot.spin_detuning == pytest.approx(6 * prot.Gbar_m1, rel=1e-9)


def test_config_roundtrip(highband):
    again = DeviceSpec.from_config(highband.to_config())
    assert again.omega_c0 == pytest.approx(highband.omega_c0)
    assert again.T2_tr == pytest.approx(highband.T2_tr)


def test_detuning_no_segments():
    sched = PulseSchedule([])
    for t in (0.0, 1e-9, 5e-8):
        assert detuning(sched, "L1", t) == 0.0


def test_detuning_single_segment():
    seg = PulseSegment("L1", TWO_PI * 4e9, 10e-9, 10e-9)
    sched = PulseSchedule([seg])
    assert detuning(sched, "L1", 15e-9) == pytest.approx(TWO_PI * 4e9)
    assert detuning(sched, "L1", 5e-9) == 0.0
    assert detuning(sched, "L1", 25e-9) == 0.0
    assert detuning(sched, "L2", 15e-9) == 0.0


def test_detuning_linear_ramp():
    seg = PulseSegment("L1", TWO_PI * 1e9, 10e-9, 10e-9, ramp=1e-9)
    sched = PulseSchedule([seg])
    assert sched.detuning("L1", 10.5e-9) == pytest.approx(TWO_PI * 0.5e9)
    assert sched.detuning("L1", 15e-9) == pytest.approx(TWO_PI * 1e9)
    assert sched.detuning("L1", 19.5e-9) == pytest.approx(TWO_PI * 0.5e9)


def test_schedule_rejects_overlap():
    a = PulseSegment("L1", 1.0, 0.0, 10e-9)
    b = PulseSegment("L1", 2.0, 5e-9, 10e-9)
    with pytest.raises(DeviceError):
        PulseSchedule([a, b])
    # touching segments are fine, distinct resonators are fine
    PulseSchedule([a, PulseSegment("L1", 2.0, 10e-9, 5e-9)])
    PulseSchedule([a, PulseSegment("L2", 2.0, 5e-9, 10e-9)])


def test_build_cell_sizes():
    topo1, _ = build_cell(1)
    assert len(topo1.logical_cavities) == 1 and len(topo1.auxiliary_cavities) == 0

    topo3, space3 = build_cell(3)
    assert topo3.logical_cavities == ("L1", "L2", "L3")
    assert topo3.auxiliary_cavities == ("A1", "A2")
    assert set(topo3.adjacency) == {("L1", "A1"), ("L2", "A1"), ("L2", "A2"), ("L3", "A2")}
    assert space3.global_cutoff == 3

    grid, _ = build_cell((2, 2))
    assert len(grid.logical_cavities) == 4
    assert len(grid.auxiliary_cavities) == 4  # one per lattice edge

    with pytest.raises(DeviceError):
        build_cell(0)


def test_zero_couplings_give_zero_hamiltonian(highband):
    dev = device_preset(
        "highband", Gbar_p1_MHz=0, Gbar_m1_MHz=0, G01_MHz=0, G12_MHz=0, kappa_MHz=0
    )
    topo, space = build_cell(2)
    h = hamiltonian_at(space, dev, topo, PulseSchedule([]), 3e-9)
    assert h.nnz == 0


def test_single_cavity_spin_block(highband):
    # only the m=-1 coupling on: H reduces to the photon/spin exchange block.
    dev = device_preset("highband", Gbar_p1_MHz=0, G01_MHz=0, G12_MHz=0, kappa_MHz=0)
    topo, space = build_cell(1, global_cutoff=1)
    model = DeviceModel(space, dev, topo)
    h = model.hamiltonian_at(PulseSchedule([]), 0.0).to_dense()
    i_ph = space.index_of((1, 0, 0))
    i_sm = space.index_of((0, 1, 0))
    # quoted Gbar is the full vacuum-Rabi splitting; the matrix element is half
    assert h[i_ph, i_sm] == pytest.approx(dev.Gbar_m1 / 2)
    assert h[i_sm, i_ph] == pytest.approx(dev.Gbar_m1 / 2)
    h[i_ph, i_sm] = h[i_sm, i_ph] = 0.0
    assert np.abs(h).max() == 0.0


def test_hamiltonian_hermitian_at_random_times(highband):
    topo, space = build_cell(2)
    model = DeviceModel(space, highband, topo)
    sched = PulseSchedule(
        [
            PulseSegment("L1", TWO_PI * 4e9, 0.0, 20e-9),
            PulseSegment("A1", -TWO_PI * 6.3e9, 5e-9, 10e-9),
        ]
    )
    rng = np.random.default_rng(7)
    for t in rng.uniform(0, 20e-9, size=100):
        h = model.hamiltonian_at(sched, float(t))
        assert (h - h.adjoint()).max_abs() <= 1e-12 * max(h.max_abs(), 1.0)


def test_hamiltonian_conserves_total_excitation(highband):
    topo, space = build_cell(2)
    model = DeviceModel(space, highband, topo)
    sched = PulseSchedule([PulseSegment("L1", TWO_PI * 4e9, 0.0, 20e-9)])
    ntot = total_excitation_op(space).to_dense()
    for t in (0.0, 3.7e-9, 11e-9):
        h = model.hamiltonian_at(sched, t).to_dense()
        comm = h @ ntot - ntot @ h
        assert np.abs(comm).max() <= 1e-10 * max(np.abs(h).max(), 1.0)


def test_jump_operators(highband):
    topo, space = build_cell(2)
    ops = jump_operators(space, highband, topo)
    losses = [(op, rate) for op, rate, kind in ops if kind == "loss"]
    dephs = [(op, rate) for op, rate, kind in ops if kind == "dephasing"]
    assert len(losses) == 3  # 2 logical + 1 auxiliary photon
    assert len(dephs) == 2  # two transmon branches
    # Q = 1e6 at omega_c/2pi = 31 GHz -> Gamma/2pi = 31 kHz
    gamma_logical = [r for op, r in losses if op.excitation_grade(space) == -1][0]
    assert gamma_logical / TWO_PI == pytest.approx(31e3, rel=1e-9)
    # dephasing projectors are excitation-preserving, rate 1/T2
    for op, rate in dephs:
        assert op.excitation_grade(space) == 0
        assert rate == pytest.approx(1.0 / highband.T2_tr)
    # spin oscillators contribute none: count loss ops == photon modes
    assert all(op.excitation_grade(space) == -1 for op, _ in losses)


def test_infinite_q_means_no_loss():
    dev = device_preset("highband", Q=1e30)
    topo, space = build_cell(1)
    for op, rate, kind in jump_operators(space, dev, topo):
        if kind == "loss":
            assert rate < 1e-15


def test_bath_attachment_weights_and_embedding(highband):
    det = (TWO_PI * 1e6, -TWO_PI * 1e6)
    bath = BathAttachment(det, (0.5, 0.5))
    topo = Topology.chain(1)
    space = build_space(topo, bath=bath)
    model = DeviceModel(space, highband, topo, bath=bath)
    # coupling sum rule: sum over bath couplings^2 equals the single-mode value
    sm_terms = [t for t in model.terms if ":sm" in t.label]
    total = sum(t.coeff**2 for t in sm_terms)
    assert total == pytest.approx((highband.Gbar_m1 / 2) ** 2, rel=1e-12)
    emb = model.computational_embedding()
    # columns normalized
    assert np.allclose(np.linalg.norm(emb, axis=0), 1.0)

    with pytest.raises(DeviceError):
        BathAttachment(det, (0.7, 0.5))


def test_embedding_and_sz(highband):
    topo, space = build_cell(2)
    model = DeviceModel(space, highband, topo)
    emb = model.computational_embedding()
    assert emb.shape == (space.dim, 4)
    assert np.allclose(emb.conj().T @ emb, np.eye(4))
    sz = model.total_sz_diag()
    # |00> has both excitations on the spin side: S_z = +1
    i00 = int(np.argmax(np.abs(emb[:, 0])))
    assert sz[i00] == pytest.approx(1.0)
    i11 = int(np.argmax(np.abs(emb[:, 3])))
    assert sz[i11] == pytest.approx(-1.0)


def test_topology_validation():
    with pytest.raises(DeviceError):
        Topology(("L1", "L2"), ("A1",), (("L1", "A1"),))  # L2 disconnected
    with pytest.raises(DeviceError):
        Topology(("L1",), ("L1",), ())
