"""Time-evolution engines, fidelity, observables, convergence checks.

Two integrators share one interface:

``rk4``
    Fixed-step classical 4th-order Runge-Kutta in the idle interaction
    picture.  The step is chosen so that the phase advanced per step by the
    stiffest scale (coupling norms, shift amplitudes, *and* the coupling
    phase frequencies) stays below ``max_phase_per_step``.

``segment``
    Exact piecewise propagation: within one pulse segment the lab-frame
    Hamiltonian is constant, so the propagator is a cached eigendecomposition.
    Pure states evolve exactly; Lindblad runs interleave the exact unitary
    chunks with dissipator kicks (Strang splitting, merged half-kicks).
    Loss rates are ~5 orders of magnitude below the coupling scales, which
    keeps the splitting error far below the fidelity tolerances; the rk4
    cross-check test pins that down.

States are idle-interaction-picture objects at t = 0; recorded values and
final states are reported in the same frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .device import DeviceModel, DeviceSpec, PulseSchedule, Topology
from .hilbert import DensityMatrix, PureState, SparseOperator, SpaceDescriptor


class DynamicsError(RuntimeError):
    """Integration failure: trace drift, positivity loss, or bad setup."""


@dataclass
class IntegratorConfig:
    """Integration controls.

    ``h`` forces a fixed rk4 step (validated against the stiffness bound);
    ``strang_dt`` is the dissipator-interleaving chunk of the segment
    engine.  ``cutoff_margin`` is used by convergence reruns.
    """

    method: str = "segment"
    h: float | None = None
    max_phase_per_step: float = 0.005
    strang_dt: float = 0.25e-9
    record_times: Sequence[float] | None = None
    cutoff_margin: int = 1
    trace_tol: float = 1e-6
    positivity_floor: float = -1e-6
    check_positivity: bool = True

    def __post_init__(self):
        if self.method not in ("segment", "rk4"):
            raise DynamicsError(f"unknown integrator method {self.method!r}")
        if self.h is not None and self.h <= 0:
            raise DynamicsError("h must be > 0")
        if self.strang_dt <= 0:
            raise DynamicsError("strang_dt must be > 0")


@dataclass
class Trajectory:
    times: np.ndarray
    observables: dict[str, np.ndarray]
    final_state: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def observable(self, name: str) -> np.ndarray:
        return self.observables[name]


# ---------------------------------------------------------------------------
# helpers


def _as_vector(state) -> np.ndarray:
    if isinstance(state, PureState):
        return state.vector.copy()
    v = np.asarray(state, dtype=np.complex128)
    if v.ndim != 1:
        raise DynamicsError("expected a state vector")
    return v.copy()


def _as_matrix(state) -> np.ndarray:
    if isinstance(state, DensityMatrix):
        return state.matrix.copy()
    if isinstance(state, PureState):
        return np.outer(state.vector, state.vector.conj())
    m = np.asarray(state, dtype=np.complex128)
    if m.ndim == 1:
        return np.outer(m, m.conj())
    return m.copy()


def _eval_observables(observables, vec=None, rho=None, idle_phases=None):
    out = {}
    for name, op in (observables or {}).items():
        if isinstance(op, SparseOperator):
            op = op.to_dense()
        op = np.asarray(op)
        if op.ndim == 1:  # diagonal observable, frame invariant
            if vec is not None:
                val = float(np.real(np.sum(op * np.abs(vec) ** 2)))
            else:
                val = float(np.real(np.sum(op * np.diag(rho))))
        else:
            if vec is not None:
                v = vec if idle_phases is None else idle_phases * vec
                val = float(np.real(np.vdot(v, op @ v)))
            else:
                r = rho if idle_phases is None else (
                    (idle_phases[:, None] * rho) * idle_phases.conj()[None, :]
                )
                val = float(np.real(np.trace(op @ r)))
        out[name] = val
    return out


def _record_grid(schedule: PulseSchedule, config: IntegratorConfig) -> np.ndarray:
    if config.record_times is not None:
        times = np.asarray(sorted(set(float(t) for t in config.record_times)))
        if times.size and (times[0] < -1e-15 or times[-1] > schedule.t_end + 1e-12):
            raise DynamicsError("record_times outside the schedule horizon")
        return times
    return np.array([0.0, schedule.t_end]) if schedule.t_end > 0 else np.array([0.0])


def _intervals(schedule: PulseSchedule, record_times: np.ndarray):
    """(t0, t1, active-config) slices covering [0, horizon], flat per slice."""
    horizon = max(schedule.t_end, record_times[-1] if record_times.size else 0.0)
    events = set(np.round(schedule.breakpoints(), 15)) | {0.0, horizon}
    events |= {round(float(t), 15) for t in record_times}
    events = sorted(t for t in events if 0.0 <= t <= horizon + 1e-15)
    out = []
    has_ramp = any(s.ramp > 0 for s in schedule.segments)
    for t0, t1 in zip(events, events[1:]):
        if t1 - t0 <= 1e-15:
            continue
        if has_ramp and any(
            s.ramp > 0
            and (t0 < s.t_start + s.ramp - 1e-15 or t1 > s.t_end - s.ramp + 1e-15)
            and not (t1 <= s.t_start or t0 >= s.t_end)
            for s in schedule.segments
        ):
            n_sub = 16
            grid = np.linspace(t0, t1, n_sub + 1)
            for a, b in zip(grid, grid[1:]):
                mid = 0.5 * (a + b)
                out.append((a, b, schedule.active_at(mid)))
        else:
            mid = 0.5 * (t0 + t1)
            out.append((t0, t1, schedule.active_at(mid)))
    return out


class _SegmentCache:
    """Eigendecompositions of lab-frame Hamiltonians keyed by pulse config."""

    def __init__(self, model: DeviceModel, sub_idx: np.ndarray | None = None):
        self.model = model
        self.sub = sub_idx
        self._cache: dict = {}

    def _key(self, active):
        return tuple((res, round(delta, 3)) for res, delta in active)

    def get(self, active):
        key = self._key(active)
        if key not in self._cache:
            h = self.model.lab_hamiltonian(active)
            if self.sub is not None:
                h = h[np.ix_(self.sub, self.sub)]
            vals, vecs = np.linalg.eigh(h)
            self._cache[key] = (vals, vecs)
        return self._cache[key]

    def propagate_vec(self, active, vec, tau):
        vals, vecs = self.get(active)
        phases = np.exp(-1j * vals * tau)
        if vec.ndim == 2:
            return vecs @ (phases[:, None] * (vecs.conj().T @ vec))
        return vecs @ (phases * (vecs.conj().T @ vec))

    def unitary(self, active, tau):
        vals, vecs = self.get(active)
        return (vecs * np.exp(-1j * vals * tau)[None, :]) @ vecs.conj().T


# ---------------------------------------------------------------------------
# unitary evolution


def evolve_unitary(
    psi0,
    schedule: PulseSchedule,
    device: DeviceSpec | None = None,
    topology: Topology | None = None,
    config: IntegratorConfig | None = None,
    *,
    model: DeviceModel | None = None,
    space: SpaceDescriptor | None = None,
    observables: Mapping | None = None,
) -> Trajectory:
    """Schroedinger propagation of a pure state under a pulse schedule."""
    config = config or IntegratorConfig()
    if model is None:
        if space is None or device is None or topology is None:
            raise DynamicsError("provide either model= or (space=, device, topology)")
        model = DeviceModel(space, device, topology)
    psi = _as_vector(psi0)
    if psi.size != model.space.dim:
        raise DynamicsError("state dimension does not match the space")
    record = _record_grid(schedule, config)
    t_start = time.perf_counter()

    if config.method == "rk4":
        times, states, steps = _rk4_run(model, schedule, record, config, vec=psi)
        recs = [
            _eval_observables(observables, vec=v) for v in states
        ]
        final = states[-1]
    else:
        times, states, steps = _segment_unitary(model, schedule, record, psi)
        recs = [_eval_observables(observables, vec=v) for v in states]
        final = states[-1]

    norm_drift = abs(np.linalg.norm(final) - np.linalg.norm(psi))
    if norm_drift > 1e-9:
        raise DynamicsError(f"norm drift {norm_drift:.3e} exceeds 1e-9")
    obs = {k: np.array([r[k] for r in recs]) for k in (recs[0] if recs else {})}
    return Trajectory(
        times=np.asarray(times),
        observables=obs,
        final_state=final,
        diagnostics={
            "norm_drift": norm_drift,
            "steps": steps,
            "wall_time_s": time.perf_counter() - t_start,
        },
    )


def _segment_unitary(model: DeviceModel, schedule, record, psi):
    space = model.space
    # restrict to the occupied excitation sectors (contiguous, graded basis)
    occupied = sorted({space.sector_of(i) for i in np.nonzero(np.abs(psi) > 1e-14)[0]})
    sl = [space.sector_slices[n] for n in occupied if n in space.sector_slices]
    sub = np.concatenate([np.arange(s.start, s.stop) for s in sl]) if sl else np.arange(space.dim)
    cache = _SegmentCache(model, sub)
    h0 = model.h0_diag[sub]

    vec = psi[sub]
    out_states = []
    out_times = []
    rec = list(np.round(record, 15))
    t_now = 0.0

    def emit(t, v_lab):
        v_idle = np.exp(1j * h0 * t) * v_lab
        full = np.zeros(space.dim, dtype=np.complex128)
        full[sub] = v_idle
        out_states.append(full)
        out_times.append(t)

    if rec and rec[0] <= 1e-15:
        emit(0.0, vec)
        rec.pop(0)
    steps = 0
    for t0, t1, active in _intervals(schedule, record):
        # record times inside this interval
        while rec and rec[0] <= t1 + 1e-15:
            tr = rec.pop(0)
            vec_r = cache.propagate_vec(active, vec, tr - t0)
            emit(tr, vec_r)
        vec = cache.propagate_vec(active, vec, t1 - t0)
        steps += 1
        t_now = t1
    while rec:  # record times beyond the last segment (idle tail)
        tr = rec.pop(0)
        vec_r = cache.propagate_vec((), vec, tr - t_now)
        emit(tr, vec_r)
    return out_times, out_states, steps


def propagate_states(
    states: np.ndarray,
    schedule: PulseSchedule,
    model: DeviceModel,
) -> np.ndarray:
    """Evolve a batch of pure states (columns) to the schedule horizon.

    Exact piecewise segment propagation sharing one eigendecomposition
    cache across the batch; returns idle-frame states at t_end.
    """
    space = model.space
    states = np.asarray(states, dtype=np.complex128)
    squeeze = states.ndim == 1
    mat = states[:, None] if squeeze else states.copy()
    occupied = sorted(
        {space.sector_of(i) for i in np.nonzero(np.abs(mat).max(axis=1) > 1e-14)[0]}
    )
    sl = [space.sector_slices[n] for n in occupied if n in space.sector_slices]
    sub = np.concatenate([np.arange(s.start, s.stop) for s in sl]) if sl else np.arange(space.dim)
    cache = _SegmentCache(model, sub)
    work = mat[sub]
    t_end = schedule.t_end
    for t0, t1, active in _intervals(schedule, np.array([0.0, t_end])):
        work = cache.propagate_vec(active, work, t1 - t0)
    work = np.exp(1j * model.h0_diag[sub] * t_end)[:, None] * work
    out = np.zeros_like(mat)
    out[sub] = work
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# rk4 (idle interaction picture)


def _stiffness(model: DeviceModel, schedule: PulseSchedule) -> float:
    s = 0.0
    for term in model.terms:
        csr = term.op.to_csr()
        n1 = np.abs(csr).sum(axis=0).max()
        ninf = np.abs(csr).sum(axis=1).max()
        s += 2 * abs(term.coeff) * float(np.sqrt(n1 * ninf))
    max_delta = max((abs(seg.delta) for seg in schedule.segments), default=0.0)
    max_n = max((diag.max() for diag in model.photon_number.values()), default=1.0)
    phase = max((abs(t.omega) for t in model.terms), default=0.0)
    return max(s + max_delta * max_n, phase)


def _rk4_run(model, schedule, record, config, vec=None, rho=None, jumps=None):
    stiff = _stiffness(model, schedule)
    if config.h is not None:
        h = config.h
        if h * stiff > 0.1:
            raise DynamicsError(
                f"h*max|H| = {h * stiff:.3f} rad exceeds 0.1; reduce the step"
            )
    else:
        h = config.max_phase_per_step / stiff if stiff > 0 else 1e-10

    terms = [(t.op.to_csr(), t.omega, t.coeff) for t in model.terms]
    adj = [(op.conj().T.tocsr(), -w, c) for op, w, c in terms]
    phn = model.photon_number

    def ham_apply(t, arr, active):
        out = np.zeros_like(arr)
        for (op, w, c) in terms:
            out += (c * np.exp(1j * w * t)) * (op @ arr)
        for (op, w, c) in adj:
            out += (c * np.exp(1j * w * t)) * (op @ arr)
        diag = None
        for res, delta in active:
            d = delta * phn[res]
            diag = d if diag is None else diag + d
        if diag is not None:
            out += diag[:, None] * arr if arr.ndim == 2 else diag * arr
        return out

    if jumps:
        jump_ops = []
        for op, rate, kind in jumps:
            jump_ops.append((op.to_csr(), (op.adjoint() @ op).to_csr(), rate))

    def rhs(t, state, active):
        if rho is None:
            return -1j * ham_apply(t, state, active)
        out = -1j * (
            ham_apply(t, state, active)
            - ham_apply(t, state.conj().T, active).conj().T
        )
        if jumps:
            for x, xdx, rate in jump_ops:
                m = x @ state
                out += rate * (x @ m.conj().T).conj().T
                k = xdx @ state
                out -= 0.5 * rate * (k + k.conj().T)
        return out

    state = vec if vec is not None else rho
    t = 0.0
    rec = list(np.round(record, 15))
    out_times, out_states = [], []
    if rec and rec[0] <= 1e-15:
        out_times.append(0.0)
        out_states.append(state.copy())
        rec.pop(0)
    steps = 0
    rec_set = set(rec)
    last = rec[-1] if rec else 0.0
    for t0, target, active in _intervals(schedule, record):
        if t0 >= last - 1e-18:
            break
        target = min(target, last)
        while t < target - 1e-18:
            step = min(h, target - t)
            k1 = rhs(t, state, active)
            k2 = rhs(t + step / 2, state + step / 2 * k1, active)
            k3 = rhs(t + step / 2, state + step / 2 * k2, active)
            k4 = rhs(t + step, state + step * k3, active)
            state = state + (step / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += step
            steps += 1
        if target in rec_set:
            if rho is not None:
                state = (state + state.conj().T) / 2
            out_times.append(t)
            out_states.append(state.copy())
    return out_times, out_states, steps


# ---------------------------------------------------------------------------
# Lindblad evolution


def evolve_lindblad(
    rho0,
    schedule: PulseSchedule,
    device: DeviceSpec | None = None,
    topology: Topology | None = None,
    config: IntegratorConfig | None = None,
    *,
    model: DeviceModel | None = None,
    space: SpaceDescriptor | None = None,
    observables: Mapping | None = None,
) -> Trajectory:
    """Density-matrix master-equation propagation (loss + transmon dephasing)."""
    config = config or IntegratorConfig()
    if model is None:
        if space is None or device is None or topology is None:
            raise DynamicsError("provide either model= or (space=, device, topology)")
        model = DeviceModel(space, device, topology)
    rho = _as_matrix(rho0)
    if rho.shape[0] != model.space.dim:
        raise DynamicsError("state dimension does not match the space")
    record = _record_grid(schedule, config)
    jumps = [(op, rate, kind) for op, rate, kind in model.jump_operators() if rate > 0]
    trace0 = float(np.real(np.trace(rho)))
    t_start = time.perf_counter()

    if config.method == "rk4":
        times, states, steps = _rk4_run(model, schedule, record, config, rho=rho, jumps=jumps)
    else:
        times, states, steps = _segment_lindblad(model, schedule, record, rho, jumps, config)

    # both engines hand back idle-interaction-picture states
    herm_drift = 0.0
    recs = []
    traces = []
    for i, (t, r) in enumerate(zip(times, states)):
        herm_drift = max(herm_drift, float(np.abs(r - r.conj().T).max()))
        r = (r + r.conj().T) / 2
        states[i] = r
        traces.append(float(np.real(np.trace(r))))
        recs.append(_eval_observables(observables, rho=r))

    trace_drift = max(abs(tr - trace0) for tr in traces)
    if trace_drift > config.trace_tol:
        raise DynamicsError(f"trace drift {trace_drift:.3e} exceeds {config.trace_tol}")
    final = states[-1]
    positivity_floor = 0.0
    if config.check_positivity:
        positivity_floor = float(np.linalg.eigvalsh(final).min())
        if positivity_floor < config.positivity_floor:
            raise DynamicsError(
                f"positivity floor {positivity_floor:.3e} below {config.positivity_floor}"
            )
    obs = {k: np.array([r[k] for r in recs]) for k in (recs[0] if recs else {})}
    return Trajectory(
        times=np.asarray(times),
        observables=obs,
        final_state=final,
        diagnostics={
            "trace_drift": trace_drift,
            "trace": np.array(traces),
            "hermiticity_drift": herm_drift,
            "positivity_floor": positivity_floor,
            "steps": steps,
            "wall_time_s": time.perf_counter() - t_start,
        },
    )


def _segment_lindblad(model, schedule, record, rho, jumps, config):
    cache = _SegmentCache(model, None)
    loss = []
    deph_diag = None
    lindblad_shift = np.zeros(model.space.dim)
    for op, rate, kind in jumps:
        if kind == "loss":
            x = op.to_csr()
            n_diag = np.real((op.adjoint() @ op).to_dense().diagonal())
            loss.append((x, rate, n_diag))
        else:
            # transmon dephasing operators are diagonal projectors
            p = np.real(op.to_dense().diagonal())
            loss.append((None, rate, p))

    def lindbladian(r):
        out = np.zeros_like(r)
        for x, rate, diag in loss:
            if x is None:  # diagonal projector P: P r P - (P r + r P)/2
                out += rate * (
                    np.outer(diag, diag) * r - 0.5 * (diag[:, None] + diag[None, :]) * r
                )
            else:
                m = x @ r
                out += rate * (
                    (x @ m.conj().T).conj().T - 0.5 * (diag[:, None] + diag[None, :]) * r
                )
        return out

    def dissipate(r, tau):
        # second-order kick: exact to O((rate*tau)^3), rates are tiny
        d1 = lindbladian(r)
        return r + tau * d1 + (tau * tau / 2) * lindbladian(d1)

    h0 = model.h0_diag

    def to_idle(r, t):
        phases = np.exp(1j * h0 * t)
        return (phases[:, None] * r) * phases.conj()[None, :]

    rec = list(np.round(record, 15))
    out_times, out_states = [], []
    if rec and rec[0] <= 1e-15:
        out_times.append(0.0)
        out_states.append(rho.copy())
        rec.pop(0)
    steps = 0
    t_now = 0.0

    def advance(r, active, duration):
        nonlocal steps
        if duration <= 0:
            return r
        if not jumps:
            u = cache.unitary(active, duration)
            steps += 1
            return u @ r @ u.conj().T
        n_chunks = max(1, int(round(duration / config.strang_dt)))
        tau = duration / n_chunks
        u = cache.unitary(active, tau)
        r = dissipate(r, tau / 2)
        for k in range(n_chunks):
            r = u @ r @ u.conj().T
            r = dissipate(r, tau if k < n_chunks - 1 else tau / 2)
            steps += 1
        return r

    intervals = _intervals(schedule, record)
    for t0, t1, active in intervals:
        while rec and rec[0] <= t1 + 1e-15:
            tr = rec.pop(0)
            rho_r = advance(rho.copy(), active, tr - t0)
            out_times.append(tr)
            out_states.append(to_idle(rho_r, tr))
        rho = advance(rho, active, t1 - t0)
        t_now = t1
    while rec:
        tr = rec.pop(0)
        rho = advance(rho, (), tr - t_now)
        t_now = tr
        out_times.append(tr)
        out_states.append(to_idle(rho, tr))
    return out_times, out_states, steps


# ---------------------------------------------------------------------------
# figures of merit


def fidelity(rho, psi) -> float:
    """F = sqrt(<psi| rho |psi>), clipped against tiny negative noise."""
    psi = np.asarray(psi, dtype=np.complex128).ravel()
    if isinstance(rho, DensityMatrix):
        rho = rho.matrix
    rho = np.asarray(rho, dtype=np.complex128)
    if rho.ndim == 1:
        if rho.size != psi.size:
            raise DynamicsError("dimension mismatch in fidelity")
        return float(np.abs(np.vdot(psi, rho)))
    if rho.shape[0] != psi.size:
        raise DynamicsError("dimension mismatch in fidelity")
    val = float(np.real(np.vdot(psi, rho @ psi)))
    if val < -1e-12:
        raise DynamicsError(f"negative overlap {val:.3e} beyond numerical noise")
    return float(np.sqrt(min(max(val, 0.0), 1.0)))


def expectation(rho, observable) -> float:
    if isinstance(observable, SparseOperator):
        if not observable.is_hermitian(1e-10):
            raise DynamicsError("observable must be Hermitian")
        observable = observable.to_dense()
    observable = np.asarray(observable)
    if observable.ndim == 2 and np.abs(observable - observable.conj().T).max() > 1e-10:
        raise DynamicsError("observable must be Hermitian")
    if isinstance(rho, DensityMatrix):
        rho = rho.matrix
    rho = np.asarray(rho)
    if rho.ndim == 1:
        if observable.ndim == 1:
            return float(np.real(np.sum(observable * np.abs(rho) ** 2)))
        return float(np.real(np.vdot(rho, observable @ rho)))
    if observable.ndim == 1:
        return float(np.real(np.sum(observable * np.diag(rho))))
    return float(np.real(np.trace(observable @ rho)))


def qubit_reduce(state, model: DeviceModel) -> tuple[np.ndarray, float]:
    """Project a device state onto the 2^N computational subspace.

    Returns the renormalized qubit density matrix and the leakage fraction
    (population outside the computational subspace).  A fully leaked state
    yields a zero matrix with leakage 1.
    """
    emb = model.computational_embedding()
    if isinstance(state, (PureState, DensityMatrix)) or np.asarray(state).ndim == 1:
        if isinstance(state, PureState):
            state = state.vector
        state = np.asarray(state)
        if state.ndim == 1:
            amps = emb.conj().T @ state
            rho_q = np.outer(amps, amps.conj())
        else:
            rho_q = emb.conj().T @ state @ emb
    else:
        rho_q = emb.conj().T @ np.asarray(state) @ emb
    weight = float(np.real(np.trace(rho_q)))
    leakage = 1.0 - weight
    if weight < 1e-12:
        return np.zeros_like(rho_q), 1.0
    return rho_q / weight, leakage


@dataclass
class ConvergenceReport:
    max_deviation: float
    deviations: dict[str, float]
    passed: bool
    threshold: float


def check_convergence(
    run_fn: Callable[[IntegratorConfig, int], Trajectory],
    config: IntegratorConfig,
    threshold: float = 1e-3,
) -> ConvergenceReport:
    """Rerun with a halved step and one extra excitation-cutoff margin.

    ``run_fn(config, extra_margin)`` must rebuild the space with
    ``extra_margin`` added to the global cutoff and honor the integrator
    config.  Passes when the worst observable deviation stays below the
    threshold.
    """
    refined_cfg = replace(
        config,
        h=None if config.h is None else config.h / 2,
        max_phase_per_step=config.max_phase_per_step / 2,
        strang_dt=config.strang_dt / 2,
    )
    try:
        base = run_fn(config, 0)
        fine = run_fn(refined_cfg, 1)
    except DynamicsError:
        # an integration failure in either run counts as a flagged failure
        return ConvergenceReport(float("inf"), {}, False, threshold)
    devs = {}
    for name, series in base.observables.items():
        other = fine.observables[name]
        n = min(series.size, other.size)
        if n == 0:
            continue
        devs[name] = float(np.abs(series[:n] - other[:n]).max())
    worst = max(devs.values(), default=0.0)
    if not np.isfinite(worst):
        raise DynamicsError("divergence between refinements")
    return ConvergenceReport(worst, devs, worst < threshold, threshold)
