"""Device parameterization, array topology, pulse schedules, Hamiltonian assembly.

The architecture is an array of superconducting resonators.  Each *logical*
cavity hosts a photon mode plus two collective spin-oscillator modes
(m = -1 encodes the qubit together with the photon, m = +1 is a storage
slot); each *auxiliary* cavity hosts a photon mode and a three-level
transmon.  The only control knob is a piecewise-constant shift delta_c(t)
of individual resonator frequencies.

All internal frequencies and couplings are angular (rad/s).  JSON configs
use GHz for frequencies (as omega/2pi), MHz for couplings and microseconds
for the transmon dephasing time.

Frame convention: operators are expressed in the idle interaction picture,
H0 = H_spin + H_transmon + H_photon(t=0).  Shift pulses then appear as an
explicit delta_r(t) n_r term while every coupling carries a fixed phase
e^{i (idle-frequency difference) t}.  The frame-invariance test in the
dynamics suite guards this choice.

Coupling-strength convention: quoted ensemble couplings Gbar are full
vacuum-Rabi splittings, so the spin-photon matrix element is Gbar/2 and a
resonant pulse of duration T rotates the hybrid qubit by theta = Gbar * T.
Transmon-photon and photon-photon couplings enter as bare matrix elements
(full population transfer after pi/(2 G)).  The elementary-gate timing
table fixes both choices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .hilbert import (
    PHOTON_AUXILIARY,
    PHOTON_LOGICAL,
    SPIN_OSC_MINUS,
    SPIN_OSC_PLUS,
    TRANSMON,
    HilbertError,
    ModeSpec,
    SpaceDescriptor,
    SparseOperator,
    enumerate_basis,
    ladder,
    number_op,
    transmon_transition,
)

TWO_PI = 2.0 * math.pi


class DeviceError(ValueError):
    """Inconsistent device parameters, topology, or schedule."""


@dataclass(frozen=True)
class DeviceSpec:
    """Operating frequencies, couplings and loss parameters (rad/s, s).

    ``omega_p1`` / ``omega_m1`` are the m = +1 / m = -1 spin gaps,
    ``omega_c0`` / ``omega_tc0`` the idle logical / auxiliary resonator
    frequencies.  ``ensemble_size_note`` is documentation only: the spin
    count enters solely through the collective couplings Gbar.
    """

    omega_p1: float
    omega_m1: float
    omega_c0: float
    omega_tc0: float
    Omega01: float
    Omega12: float
    Gbar_p1: float
    Gbar_m1: float
    G01: float
    G12: float
    kappa: float
    Q: float
    T2_tr: float
    ensemble_size_note: str = ""
    dephasing_rate_convention: str = "per-branch"
    omega_c0_overrides: Mapping[str, float] = field(default_factory=dict)
    omega_tc0_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("omega_p1", "omega_m1", "omega_c0", "omega_tc0", "Omega01", "Omega12"):
            if getattr(self, name) <= 0:
                raise DeviceError(f"{name} must be > 0")
        for name in ("Gbar_p1", "Gbar_m1", "G01", "G12", "kappa"):
            if getattr(self, name) < 0:
                raise DeviceError(f"{name} must be >= 0")
        if self.Q <= 0:
            raise DeviceError("Q must be > 0")
        if self.T2_tr <= 0:
            raise DeviceError("T2_tr must be > 0")
        if self.dephasing_rate_convention not in ("per-branch", "half"):
            raise DeviceError("dephasing_rate_convention must be 'per-branch' or 'half'")

    def omega_c0_of(self, cavity: str) -> float:
        return self.omega_c0_overrides.get(cavity, self.omega_c0)

    def omega_tc0_of(self, cavity: str) -> float:
        return self.omega_tc0_overrides.get(cavity, self.omega_tc0)

    def loss_rate_logical(self, cavity: str) -> float:
        """Photon loss rate Gamma = omega_c(0) / Q."""
        return self.omega_c0_of(cavity) / self.Q

    def loss_rate_auxiliary(self, cavity: str) -> float:
        return self.omega_tc0_of(cavity) / self.Q

    def dephasing_rate(self) -> float:
        rate = 1.0 / self.T2_tr
        return rate / 2.0 if self.dephasing_rate_convention == "half" else rate

    @property
    def spin_detuning(self) -> float:
        """Delta = omega_m1 - omega_c0, the qubit working detuning."""
        return self.omega_m1 - self.omega_c0

    def with_Q(self, Q: float) -> "DeviceSpec":
        return replace(self, Q=Q)

    def with_T2(self, T2_tr: float) -> "DeviceSpec":
        return replace(self, T2_tr=T2_tr)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "DeviceSpec":
        """Build from a JSON-style dict (GHz / MHz / us units)."""

        def ghz(key):
            return TWO_PI * 1e9 * float(cfg[key])

        def mhz(key):
            return TWO_PI * 1e6 * float(cfg[key])

        return cls(
            omega_p1=ghz("omega_p1_GHz"),
            omega_m1=ghz("omega_m1_GHz"),
            omega_c0=ghz("omega_c0_GHz"),
            omega_tc0=ghz("omega_tc0_GHz"),
            Omega01=ghz("Omega01_GHz"),
            Omega12=ghz("Omega12_GHz"),
            Gbar_p1=mhz("Gbar_p1_MHz"),
            Gbar_m1=mhz("Gbar_m1_MHz"),
            G01=mhz("G01_MHz"),
            G12=mhz("G12_MHz"),
            kappa=mhz("kappa_MHz"),
            Q=float(cfg["Q"]),
            T2_tr=1e-6 * float(cfg["T2_tr_us"]),
            ensemble_size_note=str(cfg.get("ensemble_size_note", "")),
            dephasing_rate_convention=str(cfg.get("dephasing_rate_convention", "per-branch")),
        )

    def to_config(self) -> dict:
        return {
            "omega_p1_GHz": self.omega_p1 / TWO_PI / 1e9,
            "omega_m1_GHz": self.omega_m1 / TWO_PI / 1e9,
            "omega_c0_GHz": self.omega_c0 / TWO_PI / 1e9,
            "omega_tc0_GHz": self.omega_tc0 / TWO_PI / 1e9,
            "Omega01_GHz": self.Omega01 / TWO_PI / 1e9,
            "Omega12_GHz": self.Omega12 / TWO_PI / 1e9,
            "Gbar_p1_MHz": self.Gbar_p1 / TWO_PI / 1e6,
            "Gbar_m1_MHz": self.Gbar_m1 / TWO_PI / 1e6,
            "G01_MHz": self.G01 / TWO_PI / 1e6,
            "G12_MHz": self.G12 / TWO_PI / 1e6,
            "kappa_MHz": self.kappa / TWO_PI / 1e6,
            "Q": self.Q,
            "T2_tr_us": self.T2_tr * 1e6,
            "dephasing_rate_convention": self.dephasing_rate_convention,
        }


_PRESETS = {
    # high-frequency operating point used for the elementary-gate table
    "highband": {
        "omega_p1_GHz": 37.0,
        "omega_m1_GHz": 35.0,
        "omega_c0_GHz": 31.0,
        "omega_tc0_GHz": 28.0,
        "Omega01_GHz": 21.7,
        "Omega12_GHz": 19.6,
        "Gbar_p1_MHz": 40.0,
        "Gbar_m1_MHz": 40.0,
        "G01_MHz": 30.0,
        "G12_MHz": 40.0,
        "kappa_MHz": 30.0,
        "Q": 1e6,
        "T2_tr_us": 10.0,
    },
    # cavity-protected operating point: small spin detuning Delta = 6 Gbar
    "protected": {
        "omega_p1_GHz": 12.0,
        "omega_m1_GHz": 14.18,
        "omega_c0_GHz": 14.0,
        "omega_tc0_GHz": 10.2,
        "Omega01_GHz": 9.2,
        "Omega12_GHz": 8.3,
        "Gbar_p1_MHz": 33.0,
        "Gbar_m1_MHz": 30.0,
        "G01_MHz": 30.0,
        "G12_MHz": 40.0,
        "kappa_MHz": 30.0,
        "Q": 1e6,
        "T2_tr_us": 10.0,
    },
}


def device_preset(name: str, **overrides) -> DeviceSpec:
    if name not in _PRESETS:
        raise DeviceError(f"unknown device preset {name!r}; available: {sorted(_PRESETS)}")
    cfg = dict(_PRESETS[name])
    cfg.update(overrides)
    return DeviceSpec.from_config(cfg)


def preset_names() -> list[str]:
    return sorted(_PRESETS)


@dataclass(frozen=True)
class Topology:
    """Logical and auxiliary cavity ids plus their capacitive adjacency."""

    logical_cavities: tuple[str, ...]
    auxiliary_cavities: tuple[str, ...]
    adjacency: tuple[tuple[str, str], ...]  # (logical, auxiliary) pairs

    def __post_init__(self):
        log, aux = set(self.logical_cavities), set(self.auxiliary_cavities)
        if log & aux:
            raise DeviceError("logical and auxiliary ids overlap")
        for mu, j in self.adjacency:
            if mu not in log or j not in aux:
                raise DeviceError(f"adjacency pair ({mu}, {j}) must link logical to auxiliary")
        if len(self.logical_cavities) > 1:
            # connectivity over the bipartite cavity graph
            nbrs: dict[str, set[str]] = {c: set() for c in list(log) + list(aux)}
            for mu, j in self.adjacency:
                nbrs[mu].add(j)
                nbrs[j].add(mu)
            seen = {self.logical_cavities[0]}
            stack = [self.logical_cavities[0]]
            while stack:
                for n in nbrs[stack.pop()]:
                    if n not in seen:
                        seen.add(n)
                        stack.append(n)
            if not (log | aux) <= seen:
                raise DeviceError("cavity graph is not connected")

    @property
    def n_qubits(self) -> int:
        return len(self.logical_cavities)

    def auxiliaries_of(self, logical: str) -> list[str]:
        return [j for mu, j in self.adjacency if mu == logical]

    def logicals_of(self, aux: str) -> list[str]:
        return [mu for mu, j in self.adjacency if j == aux]

    def common_auxiliary(self, qa: str, qb: str) -> str | None:
        common = set(self.auxiliaries_of(qa)) & set(self.auxiliaries_of(qb))
        return sorted(common)[0] if common else None

    @classmethod
    def chain(cls, n_qubits: int) -> "Topology":
        if n_qubits < 1:
            raise DeviceError("chain needs at least one qubit")
        logical = tuple(f"L{i}" for i in range(1, n_qubits + 1))
        aux = tuple(f"A{i}" for i in range(1, n_qubits))
        adj = []
        for i in range(1, n_qubits):
            adj.append((f"L{i}", f"A{i}"))
            adj.append((f"L{i + 1}", f"A{i}"))
        return cls(logical, aux, tuple(adj))

    @classmethod
    def grid(cls, n_rows: int, n_cols: int) -> "Topology":
        """Two sub-lattices: logical cavities on sites, auxiliaries on edges."""
        if n_rows < 1 or n_cols < 1:
            raise DeviceError("grid needs at least one site")
        logical = tuple(f"L{r}_{c}" for r in range(1, n_rows + 1) for c in range(1, n_cols + 1))
        aux = []
        adj = []
        for r in range(1, n_rows + 1):
            for c in range(1, n_cols + 1):
                if c < n_cols:  # horizontal edge
                    j = f"Ah{r}_{c}"
                    aux.append(j)
                    adj += [(f"L{r}_{c}", j), (f"L{r}_{c + 1}", j)]
                if r < n_rows:  # vertical edge
                    j = f"Av{r}_{c}"
                    aux.append(j)
                    adj += [(f"L{r}_{c}", j), (f"L{r + 1}_{c}", j)]
        return cls(logical, tuple(aux), tuple(adj))


@dataclass(frozen=True)
class PulseSegment:
    """One piecewise-constant detuning window on a single resonator."""

    resonator: str
    delta: float  # rad/s
    t_start: float  # s
    duration: float  # s
    ramp: float = 0.0  # linear edge smoothing, 0 = ideal step

    def __post_init__(self):
        if self.duration <= 0:
            raise DeviceError("segment duration must be > 0")
        if self.t_start < 0:
            raise DeviceError("segment t_start must be >= 0")
        if self.ramp < 0 or 2 * self.ramp > self.duration:
            raise DeviceError("ramp must satisfy 0 <= 2*ramp <= duration")

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration

    def amplitude_at(self, t: float) -> float:
        if not (self.t_start <= t < self.t_end):
            return 0.0
        if self.ramp <= 0:
            return self.delta
        frac = min(1.0, (t - self.t_start) / self.ramp, (self.t_end - t) / self.ramp)
        return self.delta * max(0.0, frac)


_OVERLAP_TOL = 1e-15


class PulseSchedule:
    """Collection of non-overlapping (per resonator) detuning segments."""

    def __init__(self, segments: Iterable[PulseSegment] = (), t_end: float | None = None):
        segs = sorted(segments, key=lambda s: (s.resonator, s.t_start))
        by_res: dict[str, list[PulseSegment]] = {}
        for s in segs:
            by_res.setdefault(s.resonator, []).append(s)
        for res, lst in by_res.items():
            for a, b in zip(lst, lst[1:]):
                if b.t_start < a.t_end - _OVERLAP_TOL:
                    raise DeviceError(
                        f"segments overlap on {res}: [{a.t_start}, {a.t_end}) and "
                        f"[{b.t_start}, {b.t_end})"
                    )
        self.segments: tuple[PulseSegment, ...] = tuple(
            sorted(segs, key=lambda s: (s.t_start, s.resonator))
        )
        horizon = max((s.t_end for s in segs), default=0.0)
        self.t_end = horizon if t_end is None else float(t_end)
        if self.t_end + _OVERLAP_TOL < horizon:
            raise DeviceError("t_end shorter than the last segment")
        self._by_res = by_res

    def detuning(self, resonator: str, t: float) -> float:
        """Active shift amplitude delta_c(t) of one resonator (0 when idle)."""
        for s in self._by_res.get(resonator, ()):
            if s.t_start <= t < s.t_end:
                return s.amplitude_at(t)
            if s.t_start > t:
                break
        return 0.0

    def resonators(self) -> list[str]:
        return sorted(self._by_res)

    def breakpoints(self) -> np.ndarray:
        """Sorted unique times where the active-segment configuration changes."""
        pts = {0.0, self.t_end}
        for s in self.segments:
            pts.add(s.t_start)
            pts.add(s.t_end)
            if s.ramp > 0:
                pts.add(s.t_start + s.ramp)
                pts.add(s.t_end - s.ramp)
        return np.array(sorted(p for p in pts if 0.0 <= p <= self.t_end + _OVERLAP_TOL))

    def active_at(self, t: float) -> tuple[tuple[str, float], ...]:
        """(resonator, amplitude) pairs active at time t, sorted by resonator."""
        out = []
        for res in self.resonators():
            d = self.detuning(res, t)
            if d != 0.0:
                out.append((res, d))
        return tuple(out)

    def extended(self, others: Iterable[PulseSegment], t_end: float | None = None) -> "PulseSchedule":
        return PulseSchedule(list(self.segments) + list(others), t_end=t_end)

    def shifted(self, dt: float) -> "PulseSchedule":
        segs = [replace(s, t_start=s.t_start + dt) for s in self.segments]
        return PulseSchedule(segs, t_end=self.t_end + dt)

    def dump_csv(self, fh) -> None:
        fh.write("resonator,delta_GHz,t_start_ns,duration_ns\n")
        for s in self.segments:
            fh.write(
                f"{s.resonator},{s.delta / TWO_PI / 1e9:.9g},"
                f"{s.t_start * 1e9:.9g},{s.duration * 1e9:.9g}\n"
            )


def detuning(schedule: PulseSchedule, resonator: str, t: float) -> float:
    return schedule.detuning(resonator, t)


# ---------------------------------------------------------------------------
# space construction


@dataclass(frozen=True)
class BathAttachment:
    """Discretized inhomogeneous spin bath replacing each m=-1 oscillator.

    ``detunings`` are offsets (rad/s) of the individual ensemble sub-modes
    around omega_m1; ``weights`` are the coupling weights w_k (sum to 1) so
    that sub-mode k couples with (Gbar/2) sqrt(w_k).
    """

    detunings: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.detunings) != len(self.weights):
            raise DeviceError("bath detunings and weights must have equal length")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise DeviceError("bath weights must sum to 1")


DEFAULT_PHOTON_CUTOFF = 2
DEFAULT_SPIN_CUTOFF = 1


def build_space(
    topology: Topology,
    photon_cutoff: int = DEFAULT_PHOTON_CUTOFF,
    spin_cutoff: int = DEFAULT_SPIN_CUTOFF,
    global_cutoff: int | None = None,
    cutoff_margin: int = 0,
    bath: BathAttachment | None = None,
) -> SpaceDescriptor:
    """Enumerate the register basis for a topology.

    The default global cutoff equals the number of logical qubits (each
    hybrid qubit carries exactly one excitation and the rotating-wave
    Hamiltonian conserves the total; loss only lowers it).  ``cutoff_margin``
    adds headroom for convergence checks.
    """
    modes: list[ModeSpec] = []
    for mu in topology.logical_cavities:
        modes.append(ModeSpec(f"{mu}:ph", PHOTON_LOGICAL, photon_cutoff, mu))
        if bath is None:
            modes.append(ModeSpec(f"{mu}:sm", SPIN_OSC_MINUS, spin_cutoff, mu))
        else:
            for k in range(len(bath.detunings)):
                modes.append(ModeSpec(f"{mu}:sm{k}", SPIN_OSC_MINUS, spin_cutoff, mu))
        modes.append(ModeSpec(f"{mu}:sp", SPIN_OSC_PLUS, spin_cutoff, mu))
    for j in topology.auxiliary_cavities:
        modes.append(ModeSpec(f"{j}:ph", PHOTON_AUXILIARY, photon_cutoff, j))
        modes.append(ModeSpec(f"{j}:tr", TRANSMON, 2, j))
    if global_cutoff is None:
        global_cutoff = topology.n_qubits + cutoff_margin
    return enumerate_basis(modes, global_cutoff)


def build_cell(
    topology_request,
    **space_kwargs,
) -> tuple[Topology, SpaceDescriptor]:
    """Construct a linear chain (int request) or grid ((rows, cols) request)."""
    if isinstance(topology_request, Topology):
        topo = topology_request
    elif isinstance(topology_request, int):
        topo = Topology.chain(topology_request)
    else:
        rows, cols = topology_request
        topo = Topology.grid(rows, cols)
    return topo, build_space(topo, **space_kwargs)


# ---------------------------------------------------------------------------
# Hamiltonian terms


@dataclass(frozen=True)
class CouplingTerm:
    """One rotating-wave exchange block: c * (A e^{i omega t} + h.c.)."""

    op: SparseOperator  # the A part (e.g. a_dag b)
    omega: float  # idle-frequency difference (rad/s)
    coeff: float  # real coupling strength (rad/s)
    label: str


class DeviceModel:
    """Precomputed operator blocks for one (device, topology, space) triple.

    Static coupling blocks are built once; `hamiltonian_at` phase-scales
    them per call, matching the idle interaction picture.
    """

    def __init__(
        self,
        space: SpaceDescriptor,
        device: DeviceSpec,
        topology: Topology,
        bath: BathAttachment | None = None,
    ):
        self.space = space
        self.device = device
        self.topology = topology
        self.bath = bath
        self._check_consistency()

        self.terms: list[CouplingTerm] = []
        dim = space.dim

        for mu in topology.logical_cavities:
            a_dag = ladder(space, f"{mu}:ph", "raise")
            wc = device.omega_c0_of(mu)
            if bath is None:
                b = ladder(space, f"{mu}:sm", "lower")
                self.terms.append(
                    CouplingTerm(a_dag @ b, wc - device.omega_m1, device.Gbar_m1 / 2.0, f"{mu}:sm")
                )
            else:
                for k, (dk, wk) in enumerate(zip(bath.detunings, bath.weights)):
                    b = ladder(space, f"{mu}:sm{k}", "lower")
                    self.terms.append(
                        CouplingTerm(
                            a_dag @ b,
                            wc - (device.omega_m1 + dk),
                            device.Gbar_m1 / 2.0 * math.sqrt(wk),
                            f"{mu}:sm{k}",
                        )
                    )
            bp = ladder(space, f"{mu}:sp", "lower")
            self.terms.append(
                CouplingTerm(a_dag @ bp, wc - device.omega_p1, device.Gbar_p1 / 2.0, f"{mu}:sp")
            )

        for j in topology.auxiliary_cavities:
            at_dag = ladder(space, f"{j}:ph", "raise")
            wt = device.omega_tc0_of(j)
            t01 = transmon_transition(space, j, 0)
            t12 = transmon_transition(space, j, 1)
            self.terms.append(CouplingTerm(at_dag @ t01, wt - device.Omega01, device.G01, f"{j}:tr01"))
            self.terms.append(CouplingTerm(at_dag @ t12, wt - device.Omega12, device.G12, f"{j}:tr12"))

        for mu, j in topology.adjacency:
            a_dag = ladder(space, f"{mu}:ph", "raise")
            at = ladder(space, f"{j}:ph", "lower")
            self.terms.append(
                CouplingTerm(
                    a_dag @ at,
                    device.omega_c0_of(mu) - device.omega_tc0_of(j),
                    -device.kappa,
                    f"hop:{mu}-{j}",
                )
            )

        # photon-number diagonals per resonator, for the shift-pulse term
        self.photon_number: dict[str, np.ndarray] = {}
        for mu in topology.logical_cavities:
            self.photon_number[mu] = np.real(
                number_op(space, f"{mu}:ph").to_dense().diagonal()
            )
        for j in topology.auxiliary_cavities:
            self.photon_number[j] = np.real(number_op(space, f"{j}:ph").to_dense().diagonal())

        # idle-frame mode energies (lab-frame diagonal H0)
        self.h0_diag = self._build_h0_diag()

    def _check_consistency(self):
        cavs = set(self.topology.logical_cavities) | set(self.topology.auxiliary_cavities)
        mode_cavs = {m.cavity for m in self.space.modes}
        if cavs != mode_cavs:
            raise DeviceError("space was not built from this topology")
        for mu in self.topology.logical_cavities:
            kinds = {m.kind for m in self.space.modes_in_cavity(mu)}
            if PHOTON_LOGICAL not in kinds or SPIN_OSC_MINUS not in kinds:
                raise DeviceError(f"logical cavity {mu} misses photon or spin modes")
        for j in self.topology.auxiliary_cavities:
            kinds = {m.kind for m in self.space.modes_in_cavity(j)}
            if PHOTON_AUXILIARY not in kinds or TRANSMON not in kinds:
                raise DeviceError(f"auxiliary cavity {j} misses photon or transmon modes")

    def _mode_level_energies(self, mode: ModeSpec) -> np.ndarray:
        d = self.device
        if mode.kind == TRANSMON:
            return np.array([0.0, d.Omega01, d.Omega01 + d.Omega12])
        if mode.kind == PHOTON_LOGICAL:
            w = d.omega_c0_of(mode.cavity)
        elif mode.kind == PHOTON_AUXILIARY:
            w = d.omega_tc0_of(mode.cavity)
        elif mode.kind == SPIN_OSC_PLUS:
            w = d.omega_p1
        else:  # spin-osc-minus, possibly a bath sub-mode carrying an offset
            w = d.omega_m1
            if self.bath is not None and ":sm" in mode.id and not mode.id.endswith(":sm"):
                k = int(mode.id.split(":sm")[1])
                w = d.omega_m1 + self.bath.detunings[k]
        return w * np.arange(mode.cutoff + 1)

    def _build_h0_diag(self) -> np.ndarray:
        diag = np.zeros(self.space.dim)
        for pos, mode in enumerate(self.space.modes):
            levels = self._mode_level_energies(mode)
            diag += levels[self.space.occupations[:, pos]]
        return diag

    # -- assembly ----------------------------------------------------------

    def detuning_diag(self, active: Sequence[tuple[str, float]]) -> np.ndarray:
        diag = np.zeros(self.space.dim)
        for res, delta in active:
            if res not in self.photon_number:
                raise DeviceError(f"unknown resonator {res!r}")
            diag += delta * self.photon_number[res]
        return diag

    def hamiltonian_at(self, schedule: PulseSchedule, t: float) -> SparseOperator:
        """Interaction-picture H(t): explicit shift term + phased couplings."""
        dim = self.space.dim
        h = SparseOperator.from_diagonal(self.detuning_diag(schedule.active_at(t)))
        for term in self.terms:
            phased = term.op.scale(term.coeff * np.exp(1j * term.omega * t))
            h = h + phased + phased.adjoint()
        return h

    def lab_hamiltonian(self, active: Sequence[tuple[str, float]]) -> np.ndarray:
        """Dense lab-frame H for one segment configuration (time independent)."""
        h = np.zeros((self.space.dim, self.space.dim), dtype=np.complex128)
        for term in self.terms:
            block = term.op.to_csr() * term.coeff
            h += block.toarray()
        h += h.conj().T
        np.fill_diagonal(h, np.diag(h).real + self.h0_diag + self.detuning_diag(active))
        return h

    def jump_operators(self) -> list[tuple[SparseOperator, float, str]]:
        """Loss operators per cavity photon, dephasing projectors per transmon.

        Spin-oscillator modes contribute no jump operators: single-spin
        coherence times are long enough to disregard.  Loss rates use idle
        frequencies even during shift pulses (delta_c << omega_c).
        """
        ops: list[tuple[SparseOperator, float, str]] = []
        d = self.device
        for mu in self.topology.logical_cavities:
            ops.append((ladder(self.space, f"{mu}:ph", "lower"), d.loss_rate_logical(mu), "loss"))
        for j in self.topology.auxiliary_cavities:
            ops.append((ladder(self.space, f"{j}:ph", "lower"), d.loss_rate_auxiliary(j), "loss"))
        gamma = d.dephasing_rate()
        for j in self.topology.auxiliary_cavities:
            for k in (0, 1):
                x = transmon_transition(self.space, j, k)
                ops.append((x.adjoint() @ x, gamma, "dephasing"))
        return ops

    # -- hybrid qubit encoding ---------------------------------------------

    def qubit_modes(self, mu: str) -> tuple[str, dict[str, float]]:
        """Photon mode id and spin-side weight map for one logical cavity."""
        ph = f"{mu}:ph"
        if self.bath is None:
            return ph, {f"{mu}:sm": 1.0}
        return ph, {
            f"{mu}:sm{k}": math.sqrt(w) for k, w in enumerate(self.bath.weights)
        }

    def computational_embedding(self) -> np.ndarray:
        """Columns are the device-basis vectors of the 2^N computational states.

        Bit convention: qubit 1 is the most significant bit; bit 0 means the
        excitation sits in the (bright) m=-1 spin oscillator, bit 1 means a
        cavity photon.
        """
        n = self.topology.n_qubits
        dim = self.space.dim
        emb = np.zeros((dim, 2**n), dtype=np.complex128)
        single: list[tuple[dict[int, float], dict[int, float]]] = []
        zero_occ = [0] * len(self.space.modes)
        for mu in self.topology.logical_cavities:
            ph, weights = self.qubit_modes(mu)
            pos_ph = self.space.mode_position(ph)
            spin_positions = {self.space.mode_position(mid): w for mid, w in weights.items()}
            single.append((spin_positions, {pos_ph: 1.0}))
        for b in range(2**n):
            bits = [(b >> (n - 1 - q)) & 1 for q in range(n)]
            # product over qubits of (possibly weighted) single-excitation slots
            amplitudes = [(tuple(zero_occ), 1.0)]
            for q, bit in enumerate(bits):
                slots = single[q][bit]
                nxt = []
                for occ, amp in amplitudes:
                    for pos, w in slots.items():
                        occ2 = list(occ)
                        occ2[pos] += 1
                        nxt.append((tuple(occ2), amp * w))
                amplitudes = nxt
            for occ, amp in amplitudes:
                emb[self.space.index_of(occ), b] = amp
        return emb

    def sz_diag(self, mu: str) -> np.ndarray:
        """Diagonal of s_z for one hybrid qubit: +1/2 spin side, -1/2 photon."""
        ph, weights = self.qubit_modes(mu)
        occ = self.space.occupations
        n_spin = np.zeros(self.space.dim)
        for mid in weights:
            n_spin = n_spin + occ[:, self.space.mode_position(mid)]
        n_ph = occ[:, self.space.mode_position(ph)]
        return 0.5 * (n_spin - n_ph)

    def total_sz_diag(self) -> np.ndarray:
        out = np.zeros(self.space.dim)
        for mu in self.topology.logical_cavities:
            out += self.sz_diag(mu)
        return out


def hamiltonian_at(
    space: SpaceDescriptor,
    device: DeviceSpec,
    topology: Topology,
    schedule: PulseSchedule,
    t: float,
    model: DeviceModel | None = None,
) -> SparseOperator:
    """Interaction-picture Hamiltonian at time t (see DeviceModel)."""
    if model is None:
        model = DeviceModel(space, device, topology)
    return model.hamiltonian_at(schedule, t)


def jump_operators(
    space: SpaceDescriptor,
    device: DeviceSpec,
    topology: Topology,
    model: DeviceModel | None = None,
) -> list[tuple[SparseOperator, float, str]]:
    if model is None:
        model = DeviceModel(space, device, topology)
    return model.jump_operators()
