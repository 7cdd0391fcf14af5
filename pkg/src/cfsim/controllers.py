"""Converter control blocks as pure state-space functions.

Each block maps (state, measured inputs, parameters) to state derivatives
and output signals.  Nothing here integrates or mutates; the simulation
engine owns the states.

Conventions
-----------
* All electrical quantities are per unit; time constants in seconds.
* The common network frame rotates at the nominal frequency, so every
  equation is written in deviation form: the nominal speed contributes
  nothing and bus-frequency feedback enters as a deviation ``omega_v_dev``
  (pu on the nominal angular frequency).  Frame angles ``delta`` are the
  local-frame position relative to the common frame, in radians, and the
  returned ``delta_dot`` values are per-unit frame-speed deviations.
* Integral gains are per second, so integrator states carry pu*s and the
  ratio ``kappa_pi = Ki/Kp`` of the current controller has dimension 1/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError, MagnitudeUnderflow
from .cf import EPS_MAG

# Per-unit value of the nominal frequency in the deviation convention.
OMEGA_N_PU = 1.0


# ---------------------------------------------------------------------------
# parameter / state records
# ---------------------------------------------------------------------------

@dataclass
class PICurrentParams:
    """PI current controller with inductor decoupling and optional VFF."""

    kp: float = 0.5
    ki: float = 10.0            # per second
    vff_enabled: bool = True
    lf: float = 0.08            # filter inductance, pu
    rf: float = 0.003           # filter resistance, pu

    def __post_init__(self) -> None:
        if self.kp <= 0.0:
            raise ValueError(f"current controller kp must be > 0, got {self.kp}")
        if self.ki < 0.0:
            raise ValueError(f"current controller ki must be >= 0, got {self.ki}")

    @property
    def kappa_pi(self) -> float:
        """ki/kp in 1/s; recomputed on access so gain changes propagate."""
        return self.ki / self.kp


@dataclass
class PICurrentState:
    x: complex = 0j             # integrator state, pu*s


@dataclass
class PLLParams:
    kp: float = 0.2
    ki: float = 5.0

    def __post_init__(self) -> None:
        if self.kp <= 0.0 or self.ki <= 0.0:
            raise ValueError("PLL gains must be positive")


@dataclass
class PLLState:
    x_pll: float = 0.0
    delta: float = 0.0          # rad, unwrapped


@dataclass
class OuterGflParams:
    """Outer dc-voltage / ac-voltage PI loops sharing equal gains."""

    kp_o: float = 2.0
    ki_o: float = 20.0          # per second
    v_ref_dc: float = 1.0
    v_ref_ac: float = 1.0


@dataclass
class OuterGflState:
    x_o: complex = 0j           # x_dc + j*x_ac, pu*s


@dataclass
class VirtualAdmittanceParams:
    gv: float = 0.0
    bv: float = -5.0
    vref: complex = 1.0 + 0j
    sref: complex = 0j

    def __post_init__(self) -> None:
        if self.gv == 0.0 and self.bv == 0.0:
            raise ValueError("virtual admittance loop requires (gv, bv) != (0, 0)")


@dataclass
class GfmVoltageParams:
    kp_v: float = 2.0
    ki_v: float = 40.0

    def __post_init__(self) -> None:
        if self.kp_v <= 0.0:
            raise ValueError(f"voltage controller kp_v must be > 0, got {self.kp_v}")


@dataclass
class GfmVoltageState:
    x_v: complex = 0j


@dataclass
class DroopParams:
    """P/f and Q/V droop with first-order power filtering."""

    m_p: float = 0.05
    m_q: float = 0.05
    t_f: float = 0.05
    pref: float = 0.0
    qref: float = 0.0
    v_n: float = 1.0

    def __post_init__(self) -> None:
        if self.t_f <= 0.0:
            raise ValueError(f"droop filter time constant must be > 0, got {self.t_f}")
        if self.m_p < 0.0 or self.m_q < 0.0:
            raise ValueError("droop gains must be >= 0")


@dataclass
class DroopState:
    P: float = 0.0              # filtered active power
    Q: float = 0.0              # filtered reactive power
    delta: float = 0.0


@dataclass
class VsmParams:
    """Virtual synchronous machine: swing emulation plus virtual flux.

    ``j_v`` is the per-unit swing coefficient; it coincides with the usual
    moment of inertia only because per-unit values are used throughout.
    """

    j_v: float = 10.0
    d_p: float = 20.0
    k_q: float = 10.0
    d_q: float = 0.0
    pref: float = 0.0
    qref: float = 0.0
    v_n: float = 1.0

    def __post_init__(self) -> None:
        if self.j_v <= 0.0:
            raise ValueError(f"virtual inertia must be > 0, got {self.j_v}")
        if self.d_p < 0.0:
            raise ValueError(f"virtual damping must be >= 0, got {self.d_p}")


@dataclass
class VsmState:
    delta: float = 0.0
    omega_vsm: float = 1.0      # absolute pu
    psi_v: float = 1.0          # virtual flux, pu


@dataclass
class PfrParams:
    """Primary frequency response: low-pass, washout, gain, hard limit.

    The gain carries the feedback sign; a counteracting response to a
    frequency rise uses a negative gain.
    """

    t_lp: float = 0.1
    t_wash: float = 10.0
    gain: float = -25.0
    limit: float = 0.1

    def __post_init__(self) -> None:
        if self.t_lp <= 0.0 or self.t_wash <= 0.0:
            raise ValueError("PFR time constants must be > 0")
        if self.limit < 0.0:
            raise ValueError(f"PFR limit must be >= 0, got {self.limit}")


@dataclass
class PfrState:
    x_lp: float = 0.0
    x_wash: float = 0.0


# ---------------------------------------------------------------------------
# block equations
# ---------------------------------------------------------------------------

def pi_current_output(state: PICurrentState, params: PICurrentParams,
                      i_ref: complex, i_local: complex,
                      v_local: complex) -> tuple[complex, complex]:
    """PI current controller output voltage and integrator derivative.

    v_t = [v_local if VFF] + j*Lf*i_local + kp*(i_ref - i_local) + ki*x
    (the decoupling term uses the nominal speed, 1 pu).
    """
    err = i_ref - i_local
    v_t = 1j * OMEGA_N_PU * params.lf * i_local + params.kp * err + params.ki * state.x
    if params.vff_enabled:
        v_t += v_local
    return v_t, err


def pll_derivatives(state: PLLState, params: PLLParams, v_local: complex,
                    omega_v_dev: float) -> tuple[float, float]:
    """Synchronous-reference-frame PLL driving the local q voltage to zero.

    Returns (x_pll_dot, delta_dot); delta_dot is the pu frame-speed
    deviation.  The bus-frequency feedback enters as a deviation.
    """
    vq = v_local.imag
    delta_dot = params.kp * vq + params.ki * state.x_pll - omega_v_dev
    return vq, delta_dot


def pll_gains_from_bandwidth(bandwidth_hz: float, zeta: float = 1.0,
                             omega_n: float = 2.0 * math.pi * 60.0) -> PLLParams:
    """PLL gains from a target bandwidth with kp = 2*zeta*wb, ki = wb^2.

    The rule is written on the rad/s tracking loop; the returned gains are
    rescaled to the per-unit form consumed by :func:`pll_derivatives`.
    """
    wb = 2.0 * math.pi * bandwidth_hz
    return PLLParams(kp=2.0 * zeta * wb / omega_n, ki=wb * wb / omega_n)


def current_ref_constant(i_const: complex) -> complex:
    """Constant current reference; its complex frequency is identically zero."""
    return i_const


def current_ref_from_power(sref: complex, v_local: complex) -> complex:
    """Current reference tracking a constant power reference: (sref/v')*."""
    if abs(v_local) <= EPS_MAG:
        raise MagnitudeUnderflow(
            f"power-reference current undefined at |v|={abs(v_local):.3e}")
    return (sref / v_local).conjugate()


def current_ref_virtual_admittance(params: VirtualAdmittanceParams,
                                   v_local: complex) -> complex:
    """Power-tracking reference augmented by an admittance toward vref."""
    i_s = current_ref_from_power(params.sref, v_local)
    y_v = complex(params.gv, params.bv)
    return i_s + y_v * (params.vref - v_local)


def current_ref_outer_loops(state: OuterGflState, params: OuterGflParams,
                            v_dc: float, v_mag: float) -> tuple[complex, complex]:
    """dc-voltage (d axis) and ac-voltage-magnitude (q axis) outer PI loops."""
    err = complex(params.v_ref_dc - v_dc, params.v_ref_ac - v_mag)
    i_ref = params.kp_o * err + params.ki_o * state.x_o
    return i_ref, err


def gfm_voltage_ctrl(state: GfmVoltageState, params: GfmVoltageParams,
                     v_ref: complex, v_local: complex) -> tuple[complex, complex]:
    """PI voltage controller producing the inner current reference."""
    err = v_ref - v_local
    i_ref = params.kp_v * err + params.ki_v * state.x_v
    return i_ref, err


def pf_droop_derivatives(state: DroopState, params: DroopParams, p_h: float,
                         omega_v_dev: float) -> tuple[float, float]:
    """Active-power/frequency droop synchronization.

    delta_dot = -omega_v_dev - m_p*(P - pref) (the nominal speed cancels in
    the deviation convention); the measured power is low-pass filtered.
    """
    delta_dot = -omega_v_dev - params.m_p * (state.P - params.pref)
    p_dot = (p_h - state.P) / params.t_f
    return delta_dot, p_dot


def vsm_derivatives(state: VsmState, params: VsmParams, p_h: float,
                    omega_v_dev: float) -> tuple[float, float]:
    """Virtual swing equation; speeds are absolute pu (nominal = 1)."""
    if state.omega_vsm <= 0.0:
        raise DomainError(f"VSM speed must stay positive, got {state.omega_vsm}")
    delta_dot = state.omega_vsm - (OMEGA_N_PU + omega_v_dev)
    omega_dot = (params.pref / OMEGA_N_PU - p_h / state.omega_vsm
                 + params.d_p * (OMEGA_N_PU - state.omega_vsm)) / params.j_v
    return delta_dot, omega_dot


def qv_droop_vref(state: DroopState, params: DroopParams,
                  q_h: float) -> tuple[complex, float]:
    """Q/V droop voltage reference, aligned with the local d axis."""
    v_ref = complex(params.v_n - params.m_q * (state.Q - params.qref), 0.0)
    q_dot = (q_h - state.Q) / params.t_f
    return v_ref, q_dot


def vsm_voltage_vref(state: VsmState, params: VsmParams, q_h: float,
                     v_mag: float) -> tuple[complex, float]:
    """Virtual-flux voltage reference, aligned with the local q axis."""
    psi_dot = params.k_q * (params.qref - q_h + params.d_q * (params.v_n - v_mag))
    v_ref = complex(0.0, state.psi_v * state.omega_vsm)
    return v_ref, psi_dot


def pfr_output(state: PfrState, params: PfrParams) -> float:
    """Active-power reference correction: gain on the washout output, clamped."""
    raw = params.gain * (state.x_lp - state.x_wash)
    return min(max(raw, -params.limit), params.limit)


def pfr_step(state: PfrState, params: PfrParams,
             freq_dev_in: float) -> tuple[float, tuple[float, float]]:
    """PFR block derivatives and output for a frequency-deviation input."""
    x_lp_dot = (freq_dev_in - state.x_lp) / params.t_lp
    x_wash_dot = (state.x_lp - state.x_wash) / params.t_wash
    return pfr_output(state, params), (x_lp_dot, x_wash_dot)
