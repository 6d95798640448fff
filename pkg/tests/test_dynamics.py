import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from spinphoton.device import (
    TWO_PI,
    DeviceModel,
    PulseSchedule,
    PulseSegment,
    build_cell,
    device_preset,
)
from spinphoton.dynamics import (
    DynamicsError,
    IntegratorConfig,
    check_convergence,
    evolve_lindblad,
    evolve_unitary,
    expectation,
    fidelity,
    qubit_reduce,
)
from spinphoton.hilbert import PureState, total_excitation_op


def single_qubit_model(**overrides):
    dev = device_preset("highband", **overrides)
    topo, space = build_cell(1)
    return DeviceModel(space, dev, topo)


def photon_state(model, cavity="L1"):
    occ = [0] * len(model.space.modes)
    occ[model.space.mode_position(f"{cavity}:ph")] = 1
    return PureState.basis_state(model.space, occ).vector


def test_photon_decay_matches_exponential():
    model = single_qubit_model(Gbar_p1_MHz=0, Gbar_m1_MHz=0)
    gamma = model.device.loss_rate_logical("L1")
    sched = PulseSchedule([], t_end=100e-9)
    rho0 = np.outer(photon_state(model), photon_state(model).conj())
    tlist = np.linspace(0, 100e-9, 11)
    n_ph = np.real(
        np.array([occ[model.space.mode_position("L1:ph")] for occ in model.space.basis])
    ).astype(float)
    traj = evolve_lindblad(
        rho0,
        sched,
        model=model,
        config=IntegratorConfig(record_times=tlist),
        observables={"n": n_ph},
    )
    expect = np.exp(-gamma * tlist)
    assert np.abs(traj.observables["n"] - expect).max() < 1e-8


def test_closed_system_limit_matches_unitary():
    model = single_qubit_model(Q=1e30)
    sched = PulseSchedule(
        [PulseSegment("L1", model.device.omega_m1 - model.device.omega_c0, 0.0, 5e-9)]
    )
    psi0 = photon_state(model)
    tu = evolve_unitary(psi0, sched, model=model)
    tl = evolve_lindblad(np.outer(psi0, psi0.conj()), sched, model=model)
    f = fidelity(tl.final_state, tu.final_state)
    assert f > 1 - 1e-8


def test_engines_agree_closed_and_open():
    model = single_qubit_model()
    delta = model.device.omega_m1 - model.device.omega_c0
    sched = PulseSchedule([PulseSegment("L1", delta, 1e-9, 6.25e-9)], t_end=9e-9)
    psi0 = photon_state(model)

    u_seg = evolve_unitary(psi0, sched, model=model, config=IntegratorConfig(method="segment"))
    u_rk4 = evolve_unitary(psi0, sched, model=model, config=IntegratorConfig(method="rk4"))
    assert abs(np.abs(np.vdot(u_seg.final_state, u_rk4.final_state)) - 1) < 1e-7

    rho0 = np.outer(psi0, psi0.conj())
    l_seg = evolve_lindblad(
        rho0, sched, model=model, config=IntegratorConfig(method="segment", strang_dt=0.1e-9)
    )
    l_rk4 = evolve_lindblad(rho0, sched, model=model, config=IntegratorConfig(method="rk4"))
    assert np.abs(l_seg.final_state - l_rk4.final_state).max() < 1e-6


def test_damped_rabi_matches_bloch_solution():
    # photon in the auxiliary cavity resonantly exchanged with a dephasing
    # transmon: populations follow the closed-form Bloch equations.
    dev = device_preset(
        "highband", Q=1e30, Gbar_p1_MHz=0, Gbar_m1_MHz=0, kappa_MHz=0, T2_tr_us=0.03
    )
    topo, space = build_cell(2)
    model = DeviceModel(space, dev, topo)
    g = dev.G01
    gamma = dev.dephasing_rate()
    delta = dev.Omega01 - dev.omega_tc0
    T = 40e-9
    sched = PulseSchedule([PulseSegment("A1", delta, 0.0, T)])
    psi0 = photon_state(model, "A1")
    tlist = np.linspace(0, T, 21)
    n_ph = np.real(
        np.array([occ[space.mode_position("A1:ph")] for occ in space.basis])
    ).astype(float)
    traj = evolve_lindblad(
        np.outer(psi0, psi0.conj()),
        sched,
        model=model,
        config=IntegratorConfig(record_times=tlist, strang_dt=0.05e-9),
        observables={"n": n_ph},
    )
    # Bloch: d/dt (y, z) = [[-gamma/2, -2g], [2g, 0]] (y, z), z = 2<n> - 1
    gen = np.array([[-gamma / 2, -2 * g], [2 * g, 0.0]])
    z = np.array([(scipy.linalg.expm(gen * t) @ np.array([0.0, 1.0]))[1] for t in tlist])
    assert np.abs(traj.observables["n"] - (1 + z) / 2).max() < 1e-4


def test_idle_detuned_state_unchanged():
    # all pulses off, detunings >= 2 GHz: computational population steady
    model = single_qubit_model()
    psi0 = photon_state(model)
    comp = model.computational_embedding()
    proj = np.real((np.abs(comp) ** 2).sum(axis=1))
    sched = PulseSchedule([], t_end=100e-9)
    traj = evolve_unitary(
        psi0,
        sched,
        model=model,
        config=IntegratorConfig(record_times=np.linspace(0, 100e-9, 41)),
        observables={"comp": proj},
    )
    assert np.abs(traj.observables["comp"] - 1.0).max() < 1e-3


def test_frame_invariance_against_comoving_oracle():
    # idle-picture evolution (explicit delta*n term) == co-moving diagonal
    # frame followed by exp(-i sum theta_r n_r), checked by dense integration
    model = single_qubit_model()
    dev = model.device
    space = model.space
    delta_res = dev.omega_m1 - dev.omega_c0
    segs = [
        PulseSegment("L1", delta_res, 0.5e-9, 3.0e-9),
        PulseSegment("L1", TWO_PI * 0.5e9, 4.0e-9, 1.0e-9),
    ]
    sched = PulseSchedule(segs, t_end=5.5e-9)
    psi0 = (photon_state(model) + PureState.basis_state(
        space, tuple(1 if m.id == "L1:sm" else 0 for m in space.modes)
    ).vector) / np.sqrt(2)

    traj = evolve_unitary(psi0, sched, model=model, config=IntegratorConfig(method="rk4"))

    n_ph = np.real(
        np.array([occ[space.mode_position("L1:ph")] for occ in space.basis])
    ).astype(float)

    def theta(t):  # accumulated phase integral of the shift pulse
        th = 0.0
        for s in segs:
            th += s.delta * max(0.0, min(t, s.t_end) - s.t_start)
        return th

    def h_comoving(t):
        h = model.hamiltonian_at(sched, t).to_dense()
        h -= np.diag(model.detuning_diag(sched.active_at(t)))
        ph = np.exp(1j * theta(t) * n_ph)
        return (ph[:, None] * h) * ph.conj()[None, :]

    def rhs(t, y):
        return -1j * (h_comoving(t) @ y)

    sol = scipy.integrate.solve_ivp(
        rhs, (0, sched.t_end), psi0.astype(complex), rtol=1e-10, atol=1e-12
    )
    psi_cm = sol.y[:, -1]
    psi_expected = np.exp(-1j * theta(sched.t_end) * n_ph) * psi_cm
    f = abs(np.vdot(traj.final_state, psi_expected))
    assert f > 1 - 1e-8


def test_fidelity_definitions():
    rng = np.random.default_rng(3)
    psi = rng.normal(size=6) + 1j * rng.normal(size=6)
    psi /= np.linalg.norm(psi)
    assert fidelity(np.outer(psi, psi.conj()), psi) == pytest.approx(1.0)
    d = 8
    rho = np.eye(d) / d
    psi8 = np.zeros(d)
    psi8[0] = 1.0
    assert fidelity(rho, psi8) == pytest.approx(1 / np.sqrt(d))
    with pytest.raises(DynamicsError):
        fidelity(np.eye(4) / 4, psi)


def test_expectation_and_hermiticity_guard():
    rho = np.diag([0.5, 0.5]).astype(complex)
    sz = np.diag([0.5, -0.5])
    assert expectation(rho, sz) == pytest.approx(0.0)
    bad = np.array([[0, 1], [0, 0]], dtype=complex)
    with pytest.raises(DynamicsError):
        expectation(rho, bad)


def test_qubit_reduce_ferromagnet_and_leakage():
    dev = device_preset("highband")
    topo, space = build_cell(3)
    model = DeviceModel(space, dev, topo)
    emb = model.computational_embedding()
    psi = emb[:, 7]  # |111>: all photons
    rho_q, leak = qubit_reduce(psi, model)
    assert leak == pytest.approx(0.0, abs=1e-12)
    sz_q = np.zeros(8)
    for b in range(8):
        bits = [(b >> k) & 1 for k in range(3)]
        sz_q[b] = sum(0.5 if bit == 0 else -0.5 for bit in bits)
    assert np.real(np.trace(rho_q @ np.diag(sz_q))) == pytest.approx(-1.5)

    vac = np.zeros(space.dim)
    vac[space.vacuum_index()] = 1.0
    zero_q, leak = qubit_reduce(vac, model)
    assert leak == pytest.approx(1.0)
    assert np.abs(zero_q).max() == 0.0


def test_ntot_nonincreasing_under_loss():
    model = single_qubit_model(Q=1e4)
    sched = PulseSchedule(
        [PulseSegment("L1", model.device.omega_m1 - model.device.omega_c0, 0.0, 20e-9)],
        t_end=50e-9,
    )
    psi0 = photon_state(model)
    ntot = np.real(total_excitation_op(model.space).to_dense().diagonal())
    traj = evolve_lindblad(
        np.outer(psi0, psi0.conj()),
        sched,
        model=model,
        config=IntegratorConfig(record_times=np.linspace(0, 50e-9, 21)),
        observables={"ntot": ntot},
    )
    series = traj.observables["ntot"]
    assert np.all(np.diff(series) <= 1e-10)


def test_lindblad_linear_in_small_rates():
    base = device_preset("highband")
    delta = base.omega_m1 - base.omega_c0
    sched = PulseSchedule([PulseSegment("L1", delta, 0.0, 12.5e-9)])

    def deficit(q):
        dev = device_preset("highband", Q=q)
        topo, space = build_cell(1)
        model = DeviceModel(space, dev, topo)
        psi0 = photon_state(model)
        ideal = evolve_unitary(psi0, sched, model=model).final_state
        rho = evolve_lindblad(
            np.outer(psi0, psi0.conj()), sched, model=model
        ).final_state
        return 1 - fidelity(rho, ideal) ** 2

    d1, d2 = deficit(1e6), deficit(2e6)
    assert d1 / d2 == pytest.approx(2.0, rel=0.1)


def test_trace_drift_guard():
    model = single_qubit_model()
    sched = PulseSchedule([], t_end=10e-9)
    rho0 = np.outer(photon_state(model), photon_state(model).conj()) * 1.0
    # corrupt the integrator by injecting an absurd trace tolerance
    traj = evolve_lindblad(
        rho0, sched, model=model, config=IntegratorConfig(trace_tol=1e-6)
    )
    assert traj.diagnostics["trace_drift"] < 1e-9


def test_check_convergence_trivial_and_negative_control():
    model = single_qubit_model()
    delta = model.device.omega_m1 - model.device.omega_c0
    psi0 = photon_state(model)
    n_ph = np.real(
        np.array([occ[model.space.mode_position("L1:ph")] for occ in model.space.basis])
    ).astype(float)

    def run_idle(cfg, extra_margin):
        sched = PulseSchedule([], t_end=20e-9)
        return evolve_unitary(
            psi0, sched, model=model, config=cfg, observables={"n": n_ph}
        )

    report = check_convergence(run_idle, IntegratorConfig(record_times=[0, 20e-9]))
    assert report.passed and report.max_deviation < 1e-12

    def run_coarse(cfg, extra_margin):
        sched = PulseSchedule([PulseSegment("L1", delta, 0.0, 12.5e-9)])
        return evolve_unitary(
            psi0, sched, model=model, config=cfg, observables={"n": n_ph}
        )

    coarse = IntegratorConfig(method="rk4", h=1.5e-12, record_times=[0, 12.5e-9])
    # force an intentionally coarse step: refinement must reveal the error
    report = check_convergence(run_coarse, coarse, threshold=1e-9)
    assert not report.passed


def test_rk4_step_guard():
    model = single_qubit_model()
    sched = PulseSchedule([PulseSegment("L1", TWO_PI * 4e9, 0.0, 1e-9)])
    with pytest.raises(DynamicsError):
        evolve_unitary(
            photon_state(model),
            sched,
            model=model,
            config=IntegratorConfig(method="rk4", h=1e-10),
        )
