"""The decoupled alternating Crank-Nicolson time stepper.

Each step first advances the vector and scalar potentials by the averaged
second-order-in-time wave systems, using the wave function from the previous
level only, and then advances the wave function by a Crank-Nicolson solve
against the time-averaged new potentials.  The wave-step matrices are SPD;
the wave-function step is a Cayley-type map that conserves the discrete L2
norm exactly when sources vanish.

Source sampling in verification mode: the wave equations are centered at the
previous time level (their second differences and two-level averages are),
so their sources are evaluated at t_{k-1}; the wave-function step is centered
at the half level and takes its source at t_{k-1/2}.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import forms, mms, sparsela
from .mesh import Mesh, build_structured
from .space import FeSpace, FieldVector, build_scalar_space, build_vector_space, interpolate

__all__ = [
    "SchemeConfig",
    "Spaces",
    "FieldState",
    "InitialData",
    "RunResult",
    "AlternatingStepper",
    "SchemeError",
    "snapshot_record",
]

_DIRECT_COMPLEX_LIMIT = 2500


class SchemeError(RuntimeError):
    """A step of the scheme failed; carries the step index in the message."""


@dataclass
class SchemeConfig:
    dim: int
    M: int
    degree: int
    t_final: float
    dt: float
    n_steps: int
    v0: float = 5.0
    mode: str = "mms"
    tol: float = 1e-10
    qdeg: int | None = None
    freeze_psi_weight: bool = False   # benchmarking only: fixes the A-system

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError(f"element degree must be 1 or 2, got {self.degree}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.mode not in ("mms", "free"):
            raise ValueError(f"mode must be 'mms' or 'free', got {self.mode!r}")
        if abs(self.n_steps * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(
                f"n_steps * dt = {self.n_steps * self.dt} does not reach t_final={self.t_final}")

    @property
    def quadrature_degree(self) -> int:
        return 2 * self.degree + 2 if self.qdeg is None else self.qdeg


@dataclass
class Spaces:
    psi: FeSpace
    A: FeSpace
    phi: FeSpace


@dataclass
class InitialData:
    """Initial closures; each maps points (..., d) to values."""

    psi0: callable
    A0: callable
    A1: callable
    phi0: callable
    phi1: callable


@dataclass
class FieldState:
    """Discrete fields at the current level k and the levels the next step needs."""

    k: int
    t: float
    psi: FieldVector
    psi_prev: FieldVector | None
    a: FieldVector
    a_prev: FieldVector
    a_prev2: FieldVector | None
    phi: FieldVector
    phi_prev: FieldVector
    phi_prev2: FieldVector | None


@dataclass
class RunResult:
    config: SchemeConfig
    h: float
    times: list
    psi_norms: list
    report: "mms.ErrorReport | None"
    snapshots: list
    wall_time: float
    solve_iterations: int


def build_spaces(config: SchemeConfig, mesh: Mesh | None = None) -> Spaces:
    mesh = mesh or build_structured(config.dim, config.M)
    return Spaces(
        psi=build_scalar_space(mesh, config.degree, complex_field=True),
        A=build_vector_space(mesh, config.degree),
        phi=build_scalar_space(mesh, config.degree),
    )


class AlternatingStepper:
    """Owns the spaces, the cached constant operators and the solver state."""

    def __init__(self, config: SchemeConfig, case: "mms.ManufacturedCase | None" = None,
                 spaces: Spaces | None = None):
        self.config = config
        if case is None and config.mode == "mms":
            case = mms.make_case(config.dim, config.v0)
        self.case = case
        self.spaces = spaces or build_spaces(config)
        self.mesh = self.spaces.psi.mesh
        q = config.quadrature_degree

        self.mass_psi = forms.assemble_mass(self.spaces.psi, q).matrix
        self.mass_vec = forms.assemble_mass(self.spaces.A, q).matrix
        self.D = forms.assemble_D(self.spaces.A, q).matrix
        self.mass_phi = forms.assemble_mass(self.spaces.phi, q).matrix
        self.stiff_phi = forms.assemble_stiffness(self.spaces.phi, q).matrix
        self.stiff_psi = forms.assemble_stiffness(self.spaces.psi, q).matrix
        dt = config.dt
        self.phi_system = self.mass_phi.scaled(1.0 / dt ** 2).add(self.stiff_phi, 0.5)
        self._frozen_weight = None
        self._psi_precond = None
        self.solve_iterations = 0
        if self.spaces.psi.n_dofs > _DIRECT_COMPLEX_LIMIT:
            self._psi_precond = self._build_psi_preconditioner()

    def _build_psi_preconditioner(self):
        """ILU of the step-independent part of the wave-function system.

        The step-dependent terms are mass-scale perturbations, so one ILU of
        (-i/dt) M + (1/4) K + (1/2) V0 M preconditions every step.
        """
        import scipy.sparse.linalg as spla

        dt = self.config.dt
        S0 = (self.mass_psi.scaled(-1j / dt + 0.5 * self.config.v0)
              .add(self.stiff_psi, 0.25))
        ilu = spla.spilu(S0.csr.tocsc(), drop_tol=1e-4, fill_factor=12)
        return ilu.solve

    # ---- sources -----------------------------------------------------------

    def _source_f(self, t: float):
        if self.config.mode != "mms":
            return None
        case = self.case
        return lambda x: mms.source_f(case, x, t)

    def _source_g(self, t: float):
        if self.config.mode != "mms":
            return None
        case = self.case
        return lambda x: mms.source_g(case, x, t)

    def _source_l(self, t: float):
        if self.config.mode != "mms":
            return None
        case = self.case
        return lambda x: mms.source_l(case, x, t)

    # ---- initialization ----------------------------------------------------

    def default_initial_data(self) -> InitialData:
        case = self.case
        if self.config.mode == "mms":
            return InitialData(
                psi0=lambda x: case.psi(x, 0.0),
                A0=lambda x: case.A(x, 0.0),
                A1=lambda x: case.A_t(x, 0.0),
                phi0=lambda x: case.phi(x, 0.0),
                phi1=lambda x: case.phi_t(x, 0.0),
            )
        dim = self.config.dim
        psi_case = case or mms.make_case(dim, self.config.v0)
        zero_s = lambda x: np.zeros(x.shape[:-1])
        zero_v = lambda x: np.zeros(x.shape)
        return InitialData(psi0=lambda x: psi_case.psi(x, 0.0),
                           A0=zero_v, A1=zero_v, phi0=zero_s, phi1=zero_s)

    def initialize(self, data: InitialData | None = None) -> FieldState:
        """Interpolate the initial data and build the two ghost levels."""
        data = data or self.default_initial_data()
        dt = self.config.dt
        psi0 = interpolate(self.spaces.psi, data.psi0)
        a0 = interpolate(self.spaces.A, data.A0)
        a1 = interpolate(self.spaces.A, data.A1)
        phi0 = interpolate(self.spaces.phi, data.phi0)
        phi1 = interpolate(self.spaces.phi, data.phi1)
        a_ghost = FieldVector(self.spaces.A, a0.data - dt * a1.data)
        phi_ghost = FieldVector(self.spaces.phi, phi0.data - dt * phi1.data)
        return FieldState(k=0, t=0.0,
                          psi=psi0, psi_prev=None,
                          a=a0, a_prev=a_ghost, a_prev2=None,
                          phi=phi0, phi_prev=phi_ghost, phi_prev2=None)

    # ---- the three solves of one step ---------------------------------------

    def _weighted_vec_mass(self, state: FieldState):
        if self.config.freeze_psi_weight:
            if self._frozen_weight is None:
                self._frozen_weight = forms.assemble_weighted_mass(
                    self.spaces.A, forms.Abs2(state.psi),
                    self.config.quadrature_degree).matrix
            return self._frozen_weight
        return forms.assemble_weighted_mass(
            self.spaces.A, forms.Abs2(state.psi),
            self.config.quadrature_degree).matrix

    def step_wave_a(self, state: FieldState) -> FieldVector:
        """Advance the vector potential: SPD solve of the averaged wave system."""
        cfg = self.config
        dt = cfg.dt
        W = self._weighted_vec_mass(state)
        DW = self.D.add(W)
        system = self.mass_vec.scaled(1.0 / dt ** 2).add(DW, 0.5)
        rhs = (self.mass_vec.matvec(2.0 * state.a.data - state.a_prev.data) / dt ** 2
               - 0.5 * DW.matvec(state.a_prev.data)
               - forms.assemble_current_load(self.spaces.A, state.psi, cfg.quadrature_degree))
        g = self._source_g(state.t)
        if g is not None:
            rhs = rhs + forms.assemble_source_load(self.spaces.A, g,
                                                   qdeg=cfg.quadrature_degree)
        try:
            x, rep = sparsela.solve_spd(system, rhs, cfg.tol)
        except sparsela.SolveError as err:
            raise SchemeError(f"vector-potential solve failed at step {state.k + 1}") from err
        self.solve_iterations += rep.iterations
        return FieldVector(self.spaces.A, x)

    def step_wave_phi(self, state: FieldState) -> FieldVector:
        """Advance the scalar potential: SPD solve with the cached system matrix."""
        cfg = self.config
        dt = cfg.dt
        rhs = (self.mass_phi.matvec(2.0 * state.phi.data - state.phi_prev.data) / dt ** 2
               - 0.5 * self.stiff_phi.matvec(state.phi_prev.data)
               + forms.assemble_coefficient_load(self.spaces.phi, forms.Abs2(state.psi),
                                                 cfg.quadrature_degree).real)
        l = self._source_l(state.t)
        if l is not None:
            rhs = rhs + forms.assemble_source_load(self.spaces.phi, l,
                                                   qdeg=cfg.quadrature_degree).real
        try:
            x, rep = sparsela.solve_spd(self.phi_system, rhs, cfg.tol)
        except sparsela.SolveError as err:
            raise SchemeError(f"scalar-potential solve failed at step {state.k + 1}") from err
        self.solve_iterations += rep.iterations
        return FieldVector(self.spaces.phi, x)

    def step_schrodinger(self, state: FieldState, a_new: FieldVector,
                         phi_new: FieldVector) -> FieldVector:
        """Advance the wave function against the time-averaged new potentials."""
        cfg = self.config
        dt = cfg.dt
        a_bar = FieldVector(self.spaces.A, 0.5 * (a_new.data + state.a.data))
        phi_bar = FieldVector(self.spaces.phi, 0.5 * (phi_new.data + state.phi.data))
        K_B = forms.assemble_B(self.spaces.psi, a_bar, cfg.quadrature_degree,
                               stiffness=self.stiff_psi).matrix
        M_w = forms.assemble_weighted_mass(
            self.spaces.psi, forms.FieldPlusConstant(phi_bar, cfg.v0),
            cfg.quadrature_degree).matrix
        H_half = K_B.scaled(0.25).add(M_w, 0.5)
        lhs = self.mass_psi.scaled(-1j / dt).add(H_half)
        rhs = (self.mass_psi.scaled(-1j / dt).matvec(state.psi.data)
               - H_half.matvec(state.psi.data))
        f = self._source_f(state.t + 0.5 * dt)
        if f is not None:
            rhs = rhs + forms.assemble_source_load(self.spaces.psi, f,
                                                   qdeg=cfg.quadrature_degree)
        try:
            x, rep = sparsela.solve_complex(lhs, rhs, cfg.tol, precond=self._psi_precond)
        except sparsela.SolveError as err:
            raise SchemeError(f"wave-function solve failed at step {state.k + 1}") from err
        self.solve_iterations += rep.iterations
        return FieldVector(self.spaces.psi, x)

    def advance(self, state: FieldState) -> FieldState:
        """One full step: potentials first, then the wave function; shift levels."""
        a_new = self.step_wave_a(state)
        phi_new = self.step_wave_phi(state)
        psi_new = self.step_schrodinger(state, a_new, phi_new)
        k = state.k + 1
        return FieldState(k=k, t=k * self.config.dt,
                          psi=psi_new, psi_prev=state.psi,
                          a=a_new, a_prev=state.a, a_prev2=state.a_prev,
                          phi=phi_new, phi_prev=state.phi, phi_prev2=state.phi_prev)

    # ---- norms and driving ---------------------------------------------------

    def psi_l2_norm(self, state: FieldState) -> float:
        v = state.psi.data
        return math.sqrt(abs(np.vdot(v, self.mass_psi.matvec(v)).real))

    def run(self, snapshot_steps=(), data: InitialData | None = None,
            collect_errors: bool | None = None) -> RunResult:
        """Execute all configured steps, recording norms and snapshot errors."""
        cfg = self.config
        collect = cfg.mode == "mms" if collect_errors is None else collect_errors
        t0 = time.perf_counter()
        state = self.initialize(data)
        snap_at = set(int(s) for s in snapshot_steps)
        report = mms.ErrorReport(h=self.mesh.h, dt=cfg.dt, M=cfg.M,
                                 degree=cfg.degree) if collect else None
        norms = [self.psi_l2_norm(state)]
        times = [0.0]
        snapshots = []
        if 0 in snap_at:
            snapshots.append(snapshot_record(self, state))
            if collect:
                self._record_errors(report, state)
        for _ in range(cfg.n_steps):
            state = self.advance(state)
            norms.append(self.psi_l2_norm(state))
            times.append(state.t)
            if state.k in snap_at:
                snapshots.append(snapshot_record(self, state))
                if collect:
                    self._record_errors(report, state)
        return RunResult(config=cfg, h=self.mesh.h, times=times, psi_norms=norms,
                         report=report, snapshots=snapshots,
                         wall_time=time.perf_counter() - t0,
                         solve_iterations=self.solve_iterations)

    def _record_errors(self, report: "mms.ErrorReport", state: FieldState):
        t = state.t
        report.add(t, "psi", mms.error_norms(state.psi, self.case, "psi", t))
        report.add(t, "A", mms.error_norms(state.a, self.case, "A", t))
        report.add(t, "phi", mms.error_norms(state.phi, self.case, "phi", t))


def _checksum(arr: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(),
                           digest_size=8).hexdigest()


def snapshot_record(stepper: AlternatingStepper, state: FieldState) -> dict:
    """Text-stable snapshot: time, per-field L2 norm and coefficient checksum."""
    m_vec = stepper.mass_vec
    m_phi = stepper.mass_phi
    a_norm = math.sqrt(abs(state.a.data @ m_vec.matvec(state.a.data)))
    phi_norm = math.sqrt(abs(state.phi.data @ m_phi.matvec(state.phi.data)))
    return {
        "k": state.k,
        "t": state.t,
        "psi_l2": stepper.psi_l2_norm(state),
        "A_l2": a_norm,
        "phi_l2": phi_norm,
        "psi_hash": _checksum(state.psi.data),
        "A_hash": _checksum(state.a.data),
        "phi_hash": _checksum(state.phi.data),
    }


def format_snapshots(snapshots) -> str:
    cols = ["k", "t", "psi_l2", "A_l2", "phi_l2", "psi_hash", "A_hash", "phi_hash"]
    lines = ["\t".join(cols)]
    for s in snapshots:
        lines.append("\t".join(
            f"{s[c]:.12e}" if isinstance(s[c], float) else str(s[c]) for c in cols))
    return "\n".join(lines) + "\n"
