"""Dynamic and algebraic device models attached to network buses.

Sign convention: injected current/power positive into the network.  Every
device initialized from a converged power flow is in exact equilibrium
(all state derivatives below the flat-start tolerance).

Device interface
----------------
``n_states`` differential states integrated by the engine;
``pins_voltage`` devices impose the bus voltage (converters through their
filter capacitor, the ideal slack directly) and receive the balancing
network current ``i_net``; ``n_alg`` devices add algebraic current
unknowns with matching constraint residuals (ideal PQ/PV sources).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import replace

import numpy as np

from . import controllers as ctl
from .cf import EPS_MAG, NominalBase
from .errors import (InitializationInfeasible, MagnitudeUnderflow,
                     ValidationError)
from .network import MachineData

FLAT_START_TOL = 1e-8


class Device:
    """Base class; concrete devices override what they use."""

    pins_voltage = False
    n_alg = 0
    n_states = 0
    state_names: tuple[str, ...] = ()

    def __init__(self, name: str, bus: int):
        self.name = name
        self.bus = bus
        self.connected = True
        # scheduled injection for the power-flow split; None marks the
        # (single) balancing device of a bus, which absorbs the remainder
        self.sched: complex | None = None

    def init_from_power_flow(self, v_bus: complex, s_dev: complex,
                             base: NominalBase) -> np.ndarray:
        return np.zeros(0)

    def derivatives(self, x: np.ndarray, v_bus: complex, i_net: complex,
                    base: NominalBase) -> np.ndarray:
        return np.zeros(0)

    def injection(self, x: np.ndarray, v_bus: complex,
                  base: NominalBase) -> complex:
        """Explicit injected current; only for non-pinning, non-algebraic devices."""
        return 0j

    def pinned_voltage(self, x: np.ndarray) -> complex:
        raise NotImplementedError

    def alg_residual(self, x: np.ndarray, v_bus: complex,
                     i_alg: complex) -> tuple[float, float]:
        raise NotImplementedError

    def outputs(self, x: np.ndarray, v_bus: complex, i_net: complex,
                base: NominalBase) -> dict[str, float]:
        return {}

    def set_param(self, path: str, value) -> None:
        """Resolve a dotted attribute path and assign; used by events/sweeps."""
        obj = self
        parts = path.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        if not hasattr(obj, parts[-1]):
            raise ValidationError(f"{self.name}: unknown parameter {path!r}")
        setattr(obj, parts[-1], value)

    def _check_flat(self, deriv: np.ndarray) -> None:
        if deriv.size and float(np.max(np.abs(deriv))) > FLAT_START_TOL:
            raise InitializationInfeasible(
                f"device {self.name}: residual derivative "
                f"{float(np.max(np.abs(deriv))):.3e} after back-solve")


# ---------------------------------------------------------------------------
# synchronous machine, 4th order two-axis model
# ---------------------------------------------------------------------------

class SyncMachine4(Device):
    """Two-axis (4th order) synchronous machine, stator resistance neglected.

    States: rotor angle (rad, measured to the q axis on the common frame),
    speed (pu), transient emfs e'_q and e'_d.  Mechanical power and field
    voltage are constant inputs back-solved at initialization.
    """

    n_states = 4
    state_names = ("delta", "omega", "eq_p", "ed_p")

    def __init__(self, name: str, bus: int, data: MachineData):
        super().__init__(name, bus)
        self.data = data
        self.m = 2.0 * data.h
        self.pm = 0.0
        self.vf = 0.0

    def set_param(self, path: str, value) -> None:
        super().set_param(path, value)
        if path == "data.h":
            self.m = 2.0 * self.data.h
        elif path == "m":
            self.data.h = 0.5 * self.m

    def _machine_frame(self, x: np.ndarray, v_bus: complex):
        """Local stator quantities: d axis at delta - pi/2 on the common frame."""
        vp = cmath.exp(-1j * (x[0] - 0.5 * math.pi)) * v_bus
        i_d = (x[2] - vp.imag) / self.data.xd_p
        i_q = (vp.real - x[3]) / self.data.xq_p
        return vp, i_d, i_q

    def init_from_power_flow(self, v_bus, s_dev, base):
        i_bus = (s_dev / v_bus).conjugate()
        delta = cmath.phase(v_bus + 1j * self.data.xq * i_bus)
        rot = cmath.exp(-1j * (delta - 0.5 * math.pi))
        vp = rot * v_bus
        ip = rot * i_bus
        eq_p = vp.imag + self.data.xd_p * ip.real
        ed_p = vp.real - self.data.xq_p * ip.imag
        self.vf = eq_p + (self.data.xd - self.data.xd_p) * ip.real
        x = np.array([delta, 1.0, eq_p, ed_p])
        self.pm = self.electrical_power(x, v_bus)
        self._check_flat(self.derivatives(x, v_bus, None, base))
        return x

    def electrical_power(self, x: np.ndarray, v_bus: complex) -> float:
        _, i_d, i_q = self._machine_frame(x, v_bus)
        return (x[3] * i_d + x[2] * i_q
                + (self.data.xq_p - self.data.xd_p) * i_d * i_q)

    def derivatives(self, x, v_bus, i_net, base):
        d = self.data
        _, i_d, i_q = self._machine_frame(x, v_bus)
        p_e = x[3] * i_d + x[2] * i_q + (d.xq_p - d.xd_p) * i_d * i_q
        return np.array([
            base.omega_n * (x[1] - 1.0),
            (self.pm - p_e - d.d * (x[1] - 1.0)) / self.m,
            (-x[2] - (d.xd - d.xd_p) * i_d + self.vf) / d.td0_p,
            (-x[3] + (d.xq - d.xq_p) * i_q) / d.tq0_p,
        ])

    def injection(self, x, v_bus, base):
        if not self.connected:
            return 0j
        _, i_d, i_q = self._machine_frame(x, v_bus)
        return cmath.exp(1j * (x[0] - 0.5 * math.pi)) * complex(i_d, i_q)

    def outputs(self, x, v_bus, i_net, base):
        i_inj = self.injection(x, v_bus, base)
        s = v_bus * i_inj.conjugate()
        return {"delta": x[0], "omega": x[1], "eq_p": x[2], "ed_p": x[3],
                "p": s.real, "q": s.imag, "pm": self.pm}


# ---------------------------------------------------------------------------
# static loads
# ---------------------------------------------------------------------------

class StaticLoad(Device):
    """Constant-admittance or constant-power load.

    The admittance value is frozen from the power-flow solution at the
    solved voltage; a disconnected load injects nothing.
    """

    def __init__(self, name: str, bus: int, p: float, q: float,
                 kind: str = "admittance"):
        super().__init__(name, bus)
        if kind not in ("admittance", "power"):
            raise ValidationError(f"load {name}: unknown kind {kind!r}")
        self.kind = kind
        self.p = p
        self.q = q
        self.y_load = 0j
        self.sched = complex(-p, -q)

    def init_from_power_flow(self, v_bus, s_dev, base):
        self.y_load = (-s_dev).conjugate() / (abs(v_bus) ** 2)
        return np.zeros(0)

    def injection(self, x, v_bus, base):
        if not self.connected:
            return 0j
        if self.kind == "admittance":
            return -self.y_load * v_bus
        if abs(v_bus) <= EPS_MAG:
            raise MagnitudeUnderflow(
                f"load {self.name}: voltage collapse at bus {self.bus}")
        return -(complex(self.p, self.q) / v_bus).conjugate()

    def outputs(self, x, v_bus, i_net, base):
        i_inj = self.injection(x, v_bus, base)
        s = v_bus * i_inj.conjugate()
        return {"p": s.real, "q": s.imag, "i_d": i_inj.real, "i_q": i_inj.imag,
                "connected": 1.0 if self.connected else 0.0}


# ---------------------------------------------------------------------------
# ideal devices (perfect tracking, infinitely fast)
# ---------------------------------------------------------------------------

class IdealSlack(Device):
    """Ideal voltage source: imposes the bus voltage, absorbs any current."""

    pins_voltage = True

    def __init__(self, name: str, bus: int, v_set: complex = 1.0 + 0j):
        super().__init__(name, bus)
        self.v_set = complex(v_set)

    def init_from_power_flow(self, v_bus, s_dev, base):
        self.v_set = complex(v_bus)
        return np.zeros(0)

    def pinned_voltage(self, x):
        return self.v_set

    def constraint_residual(self, v_bus: complex, i_inj: complex) -> complex:
        return v_bus - self.v_set

    def outputs(self, x, v_bus, i_net, base):
        s = v_bus * i_net.conjugate()
        return {"p": s.real, "q": s.imag, "i_d": i_net.real, "i_q": i_net.imag}


class IdealCurrentSource(Device):
    """Imposes magnitude and phase of the injected current."""

    def __init__(self, name: str, bus: int, i_set: complex = 0j,
                 sched: complex | None = None):
        super().__init__(name, bus)
        self.i_set = complex(i_set)
        self.sched = sched

    def init_from_power_flow(self, v_bus, s_dev, base):
        self.i_set = (s_dev / v_bus).conjugate()
        return np.zeros(0)

    def injection(self, x, v_bus, base):
        return self.i_set if self.connected else 0j

    def constraint_residual(self, v_bus: complex, i_inj: complex) -> complex:
        return i_inj - self.i_set

    def outputs(self, x, v_bus, i_net, base):
        s = v_bus * self.i_set.conjugate()
        return {"p": s.real, "q": s.imag}


class ConstPfCurrentSource(Device):
    """Imposes current magnitude and a constant power-factor angle."""

    def __init__(self, name: str, bus: int, i_mag: float = 0.0,
                 pf_angle: float = 0.0, sched: complex | None = None):
        super().__init__(name, bus)
        self.i_mag = i_mag
        self.pf_angle = pf_angle
        self.sched = sched

    def init_from_power_flow(self, v_bus, s_dev, base):
        i_inj = (s_dev / v_bus).conjugate()
        self.i_mag = abs(i_inj)
        self.pf_angle = cmath.phase(v_bus) - cmath.phase(i_inj)
        return np.zeros(0)

    def injection(self, x, v_bus, base):
        if not self.connected:
            return 0j
        if abs(v_bus) <= EPS_MAG:
            raise MagnitudeUnderflow(f"{self.name}: zero voltage at bus {self.bus}")
        return self.i_mag * (v_bus / abs(v_bus)) * cmath.exp(-1j * self.pf_angle)

    def constraint_residual(self, v_bus: complex, i_inj: complex) -> complex:
        return i_inj - self.injection(None, v_bus, None)


class IdealPQSource(Device):
    """Imposes the injected complex power; current is an algebraic unknown."""

    n_alg = 2

    def __init__(self, name: str, bus: int, s_set: complex = 0j):
        super().__init__(name, bus)
        self.s_set = complex(s_set)
        self.sched = complex(s_set)

    def init_from_power_flow(self, v_bus, s_dev, base):
        self.s_set = complex(s_dev)
        return np.zeros(0)

    def alg_residual(self, x, v_bus, i_alg):
        res = v_bus * i_alg.conjugate() - self.s_set
        return res.real, res.imag

    def constraint_residual(self, v_bus: complex, i_inj: complex) -> complex:
        return v_bus * i_inj.conjugate() - self.s_set

    def init_alg(self, v_bus: complex) -> complex:
        return (self.s_set / v_bus).conjugate()

    def outputs(self, x, v_bus, i_net, base):
        return {"p": self.s_set.real, "q": self.s_set.imag}


class IdealPVSource(Device):
    """Imposes voltage magnitude and active power; reactive power is free."""

    n_alg = 2

    def __init__(self, name: str, bus: int, p_set: float = 0.0,
                 v_set: float = 1.0):
        super().__init__(name, bus)
        self.p_set = p_set
        self.v_set = v_set

    def init_from_power_flow(self, v_bus, s_dev, base):
        self.p_set = s_dev.real
        self.v_set = abs(v_bus)
        return np.zeros(0)

    def alg_residual(self, x, v_bus, i_alg):
        p = (v_bus * i_alg.conjugate()).real
        return abs(v_bus) - self.v_set, p - self.p_set

    def constraint_residual(self, v_bus: complex, i_inj: complex) -> complex:
        p = (v_bus * i_inj.conjugate()).real
        return complex(abs(v_bus) - self.v_set, p - self.p_set)

    def init_alg(self, v_bus: complex) -> complex:
        # reactive component is refined by the algebraic solve
        return (complex(self.p_set, 0.0) / v_bus).conjugate()

    def outputs(self, x, v_bus, i_net, base):
        s = v_bus * i_net.conjugate() if i_net is not None else 0j
        return {"p": s.real, "q": s.imag, "v_mag": abs(v_bus)}


def ideal_device_constraint(device: Device, v: complex, i: complex) -> complex:
    """Defining constraint residual of an ideal device at an operating point."""
    if not hasattr(device, "constraint_residual"):
        raise ValidationError(f"{device.name} is not an ideal device")
    return device.constraint_residual(v, i)


# ---------------------------------------------------------------------------
# converter base: LC filter + frequency measurement + PI current control
# ---------------------------------------------------------------------------

class _FreqWashout:
    """Bus-frequency deviation from a first-order lag of the Park vector.

    The rotational speed of the lagged vector equals the washout-filtered
    derivative of the bus-voltage angle (time constant ``t_omega``) with no
    angle unwrapping involved.
    """

    def __init__(self, t_omega: float = 0.02):
        self.t_omega = t_omega

    def measure(self, v: complex, v_f: complex, omega_n: float) -> float:
        if abs(v_f) <= EPS_MAG:
            return 0.0
        z = (v - v_f) / v_f
        return z.imag / (self.t_omega * omega_n)

    def deriv(self, v: complex, v_f: complex) -> complex:
        return (v - v_f) / self.t_omega


class ConverterBase(Device):
    """Shared converter plumbing: LC output filter and frequency measurement.

    Filter states live on the common grid frame; control states on the
    device frame at angle ``delta``.  The capacitor node is the connection
    bus, so the device pins the bus voltage and receives the balancing
    network current.
    """

    pins_voltage = True

    # filter + PI integrator + measurement occupy the first 8 state slots
    _BASE_STATES = ("i_f_d", "i_f_q", "v_o_d", "v_o_q", "x_pi_d", "x_pi_q",
                    "v_f_d", "v_f_q")

    def __init__(self, name: str, bus: int, current_ctrl: ctl.PICurrentParams,
                 cf: float = 0.074, t_omega: float = 0.02):
        super().__init__(name, bus)
        self.current_ctrl = current_ctrl
        self.cf = cf
        self.washout = _FreqWashout(t_omega)
        self._omega_n = 2.0 * math.pi * 60.0    # refreshed at initialization

    def pinned_voltage(self, x):
        return complex(x[2], x[3])

    def _filter_init(self, v_bus: complex, i_inj: complex):
        """Equilibrium inductor current and bridge voltage for a bus injection."""
        i_f = i_inj + 1j * self.cf * v_bus
        v_t = v_bus + complex(self.current_ctrl.rf, self.current_ctrl.lf) * i_f
        return i_f, v_t

    def _pi_state_init(self, v_loc: complex, i_loc: complex) -> complex:
        p = self.current_ctrl
        if p.ki <= 0.0:
            raise ValidationError(
                f"{self.name}: current controller needs ki > 0 for equilibrium")
        vff = v_loc if p.vff_enabled else 0j
        return (v_loc + p.rf * i_loc - vff) / p.ki

    def _filter_derivs(self, x, v_t_grid: complex, i_net: complex,
                       omega_n: float):
        p = self.current_ctrl
        i_f = complex(x[0], x[1])
        v_o = complex(x[2], x[3])
        di = (omega_n / p.lf) * (v_t_grid - v_o - p.rf * i_f) - 1j * omega_n * i_f
        dv = (omega_n / self.cf) * (i_f - i_net) - 1j * omega_n * v_o
        return di, dv

    def _base_outputs(self, x, i_net, base):
        i_f = complex(x[0], x[1])
        v_o = complex(x[2], x[3])
        s = v_o * i_net.conjugate()
        omega_meas = self.washout.measure(v_o, complex(x[6], x[7]), base.omega_n)
        return {"p": s.real, "q": s.imag,
                "i_inj_d": i_net.real, "i_inj_q": i_net.imag,
                "i_f_d": i_f.real, "i_f_q": i_f.imag,
                "x_pi_d": x[4], "x_pi_q": x[5],
                "omega_meas": omega_meas,
                "kappa_pi": self.current_ctrl.kappa_pi}

    def set_param(self, path: str, value) -> None:
        # virtual knob: rescale kp while preserving kappa_pi = ki/kp
        if path == "current_ctrl.kp_hold_kappa":
            kappa = self.current_ctrl.kappa_pi
            self.current_ctrl.kp = value
            self.current_ctrl.ki = kappa * value
            return
        super().set_param(path, value)


# ---------------------------------------------------------------------------
# grid-following converter
# ---------------------------------------------------------------------------

GFL_SOURCES = ("const_current", "power", "virtual_admittance", "outer")


class GflConverter(ConverterBase):
    """PLL-synchronized converter with one current-reference source.

    Reference sources: constant current, constant power, virtual
    admittance, or the outer dc/ac voltage loops (which require the
    dc-link capacitor model).  The dc side is otherwise an ideal source.
    The optional primary frequency response shifts the active power
    reference and therefore pairs with the power source.
    """

    def __init__(self, name: str, bus: int, *,
                 source: str = "const_current",
                 sched: complex | None = None,
                 current_ctrl: ctl.PICurrentParams | None = None,
                 pll: ctl.PLLParams | None = None,
                 outer: ctl.OuterGflParams | None = None,
                 vadm: ctl.VirtualAdmittanceParams | None = None,
                 pfr: ctl.PfrParams | None = None,
                 pfr_input: str = "bus",
                 cf: float = 0.074,
                 dc_capacitor_tau: float | None = None,
                 t_omega: float = 0.02):
        super().__init__(name, bus, current_ctrl or ctl.PICurrentParams(),
                         cf=cf, t_omega=t_omega)
        if source not in GFL_SOURCES:
            raise ValidationError(f"{name}: unknown reference source {source!r}")
        if source == "outer":
            if dc_capacitor_tau is None:
                raise ValidationError(f"{name}: outer loops need the dc capacitor")
            if sched is not None:
                raise ValidationError(
                    f"{name}: outer loops balance their bus; drop the schedule")
        elif sched is None:
            raise ValidationError(f"{name}: scheduled injection required")
        if pfr is not None and source != "power":
            raise ValidationError(f"{name}: PFR requires the power reference source")
        if pfr_input not in ("bus", "internal"):
            raise ValidationError(f"{name}: unknown pfr input {pfr_input!r}")
        self.sched = sched
        self.source = source
        self.pll = pll or ctl.PLLParams()
        self.outer = outer or ctl.OuterGflParams()
        self.vadm = vadm
        self.pfr = pfr
        self.pfr_input = pfr_input
        self.tau_dc = dc_capacitor_tau
        self.p_load_dc = 0.0
        self.i_const = 0j
        self.sref = 0j

        names = list(self._BASE_STATES) + ["x_pll", "delta"]
        if self.tau_dc is not None:
            names.append("v_dc")
        if source == "outer":
            names += ["x_o_d", "x_o_q"]
        if pfr is not None:
            names += ["x_lp", "x_wash"]
        self.state_names = tuple(names)
        self.n_states = len(names)
        self._i_dc = names.index("v_dc") if "v_dc" in names else -1
        self._i_xo = names.index("x_o_d") if "x_o_d" in names else -1
        self._i_pfr = names.index("x_lp") if "x_lp" in names else -1

    def init_from_power_flow(self, v_bus, s_dev, base):
        i_inj = (s_dev / v_bus).conjugate()
        i_f, v_t = self._filter_init(v_bus, i_inj)
        delta = cmath.phase(v_bus)          # PLL locked: local q voltage zero
        rot = cmath.exp(-1j * delta)
        i_loc = rot * i_f
        v_loc = rot * v_bus
        x = np.zeros(self.n_states)
        x_pi = self._pi_state_init(v_loc, i_loc)
        x[0:2] = i_f.real, i_f.imag
        x[2:4] = v_bus.real, v_bus.imag
        x[4:6] = x_pi.real, x_pi.imag
        x[6:8] = v_bus.real, v_bus.imag     # frequency washout settled
        x[8] = 0.0                          # PLL integrator: zero at nominal
        x[9] = delta

        if self.source == "const_current":
            self.i_const = i_loc
        elif self.source == "power":
            self.sref = v_loc * i_loc.conjugate()
        elif self.source == "virtual_admittance":
            if self.vadm is None:
                raise ValidationError(
                    f"{self.name}: virtual admittance parameters missing")
            y_v = complex(self.vadm.gv, self.vadm.bv)
            self.vadm.sref = v_loc * (i_loc - y_v * (self.vadm.vref - v_loc)).conjugate()
        else:                               # outer loops
            self.outer.v_ref_ac = abs(v_bus)
            x[self._i_xo] = i_loc.real / self.outer.ki_o
            x[self._i_xo + 1] = i_loc.imag / self.outer.ki_o
        if self.tau_dc is not None:
            x[self._i_dc] = self.outer.v_ref_dc
            self.p_load_dc = -(v_t * i_f.conjugate()).real
        self._check_flat(self.derivatives(x, v_bus, i_inj, base))
        return x

    def _pfr_shift(self, x) -> float:
        if self.pfr is None:
            return 0.0
        return ctl.pfr_output(
            ctl.PfrState(x[self._i_pfr], x[self._i_pfr + 1]), self.pfr)

    def _current_reference(self, x, v_loc: complex) -> complex:
        if self.source == "const_current":
            return self.i_const
        if self.source == "power":
            return ctl.current_ref_from_power(self.sref + self._pfr_shift(x),
                                              v_loc)
        if self.source == "virtual_admittance":
            return ctl.current_ref_virtual_admittance(self.vadm, v_loc)
        i_ref, _ = ctl.current_ref_outer_loops(
            ctl.OuterGflState(complex(x[self._i_xo], x[self._i_xo + 1])),
            self.outer, x[self._i_dc], abs(v_loc))
        return i_ref

    def _control_eval(self, x, omega_n: float):
        """Controller chain at the current state; shared by derivatives/outputs."""
        v_o = complex(x[2], x[3])
        omega_meas = self.washout.measure(v_o, complex(x[6], x[7]), omega_n)
        delta = x[9]
        rot = cmath.exp(-1j * delta)
        v_loc = rot * v_o
        i_loc = rot * complex(x[0], x[1])
        i_ref = self._current_reference(x, v_loc)
        v_t_loc, x_pi_dot = ctl.pi_current_output(
            ctl.PICurrentState(complex(x[4], x[5])), self.current_ctrl,
            i_ref, i_loc, v_loc)
        x_pll_dot, delta_dot = ctl.pll_derivatives(
            ctl.PLLState(x[8], delta), self.pll, v_loc, omega_meas)
        return (v_o, omega_meas, rot, v_loc, i_loc, i_ref, v_t_loc,
                x_pi_dot, x_pll_dot, delta_dot)

    def derivatives(self, x, v_bus, i_net, base):
        omega_n = base.omega_n
        (v_o, omega_meas, rot, v_loc, _i_loc, _i_ref, v_t_loc,
         x_pi_dot, x_pll_dot, delta_dot) = self._control_eval(x, omega_n)
        di, dv = self._filter_derivs(x, v_t_loc / rot, i_net, omega_n)
        dvf = self.washout.deriv(v_o, complex(x[6], x[7]))

        dx = np.empty(self.n_states)
        dx[0:2] = di.real, di.imag
        dx[2:4] = dv.real, dv.imag
        dx[4:6] = x_pi_dot.real, x_pi_dot.imag
        dx[6:8] = dvf.real, dvf.imag
        dx[8] = x_pll_dot
        dx[9] = omega_n * delta_dot
        if self.tau_dc is not None:
            v_dc = x[self._i_dc]
            p_bridge = ((v_t_loc / rot) * complex(x[0], -x[1])).real
            dx[self._i_dc] = (-p_bridge - self.p_load_dc) / (v_dc * self.tau_dc)
        if self.source == "outer":
            _, xo_dot = ctl.current_ref_outer_loops(
                ctl.OuterGflState(complex(x[self._i_xo], x[self._i_xo + 1])),
                self.outer, x[self._i_dc], abs(v_loc))
            dx[self._i_xo] = xo_dot.real
            dx[self._i_xo + 1] = xo_dot.imag
        if self.pfr is not None:
            freq_in = omega_meas if self.pfr_input == "bus" else omega_meas - delta_dot
            _, (dlp, dwash) = ctl.pfr_step(
                ctl.PfrState(x[self._i_pfr], x[self._i_pfr + 1]), self.pfr,
                freq_in)
            dx[self._i_pfr] = dlp
            dx[self._i_pfr + 1] = dwash
        return dx

    def outputs(self, x, v_bus, i_net, base):
        out = self._base_outputs(x, i_net, base)
        (_v_o, _omega_meas, rot, v_loc, _i_loc, i_ref, v_t_loc,
         _x_pi_dot, _x_pll_dot, delta_dot) = self._control_eval(x, base.omega_n)
        out.update({"delta": x[9], "delta_dot": delta_dot, "x_pll": x[8],
                    "v_loc_d": v_loc.real, "v_loc_q": v_loc.imag,
                    "i_ref_d": i_ref.real, "i_ref_q": i_ref.imag,
                    "sref_d": self.sref.real + self._pfr_shift(x),
                    "sref_q": self.sref.imag})
        if self.tau_dc is not None:
            v_dc = x[self._i_dc]
            p_bridge = ((v_t_loc / rot) * complex(x[0], -x[1])).real
            i_dc = (-p_bridge - self.p_load_dc) / v_dc
            out.update({"v_dc": v_dc, "i_dc": i_dc,
                        "rho_dc": i_dc / (self.tau_dc * v_dc * base.omega_n)})
        if self.pfr is not None:
            out["pfr_out"] = self._pfr_shift(x)
        return out


# ---------------------------------------------------------------------------
# grid-forming converter
# ---------------------------------------------------------------------------

GFM_SYNC = ("droop", "vsm")


class GfmConverter(ConverterBase):
    """Voltage-forming converter: cascaded voltage/current control plus a
    power-based synchronization loop.

    Pairings follow common practice: P/f droop with the Q/V droop voltage
    reference, VSM swing emulation with the virtual-flux reference.
    """

    def __init__(self, name: str, bus: int, *,
                 sync: str = "droop",
                 current_ctrl: ctl.PICurrentParams | None = None,
                 voltage_ctrl: ctl.GfmVoltageParams | None = None,
                 droop: ctl.DroopParams | None = None,
                 vsm: ctl.VsmParams | None = None,
                 pfr: ctl.PfrParams | None = None,
                 pfr_input: str = "bus",
                 cf: float = 0.074,
                 t_omega: float = 0.02):
        super().__init__(name, bus, current_ctrl or ctl.PICurrentParams(),
                         cf=cf, t_omega=t_omega)
        if sync not in GFM_SYNC:
            raise ValidationError(f"{name}: unknown synchronization {sync!r}")
        if pfr_input not in ("bus", "internal"):
            raise ValidationError(f"{name}: unknown pfr input {pfr_input!r}")
        self.sync = sync
        self.voltage_ctrl = voltage_ctrl or ctl.GfmVoltageParams()
        self.droop = droop or ctl.DroopParams()
        self.vsm = vsm or ctl.VsmParams()
        self.pfr = pfr
        self.pfr_input = pfr_input

        names = list(self._BASE_STATES) + ["x_v_d", "x_v_q", "delta"]
        names += ["P", "Q"] if sync == "droop" else ["omega_vsm", "psi_v"]
        if pfr is not None:
            names += ["x_lp", "x_wash"]
        self.state_names = tuple(names)
        self.n_states = len(names)
        self._i_sync = names.index("P" if sync == "droop" else "omega_vsm")
        self._i_pfr = names.index("x_lp") if "x_lp" in names else -1

    def init_from_power_flow(self, v_bus, s_dev, base):
        i_inj = (s_dev / v_bus).conjugate()
        i_f, _ = self._filter_init(v_bus, i_inj)
        p_h, q_h = s_dev.real, s_dev.imag
        v_mag = abs(v_bus)

        if self.sync == "droop":
            delta = cmath.phase(v_bus)      # local voltage on the d axis
            self.droop.pref = p_h
            if self.droop.m_q > 0.0:
                self.droop.qref = q_h + (v_mag - self.droop.v_n) / self.droop.m_q
            elif abs(v_mag - self.droop.v_n) > 1e-9:
                raise InitializationInfeasible(
                    f"{self.name}: zero m_q requires |v| = v_n at the bus")
            else:
                self.droop.qref = q_h
        else:
            delta = cmath.phase(v_bus) - 0.5 * math.pi  # voltage on the q axis
            self.vsm.pref = p_h
            self.vsm.qref = q_h - self.vsm.d_q * (self.vsm.v_n - v_mag)

        rot = cmath.exp(-1j * delta)
        v_loc = rot * v_bus
        i_loc = rot * i_f
        if self.voltage_ctrl.ki_v <= 0.0:
            raise ValidationError(
                f"{self.name}: voltage controller needs ki_v > 0 for equilibrium")
        x = np.zeros(self.n_states)
        x_pi = self._pi_state_init(v_loc, i_loc)
        x_v = i_loc / self.voltage_ctrl.ki_v
        x[0:2] = i_f.real, i_f.imag
        x[2:4] = v_bus.real, v_bus.imag
        x[4:6] = x_pi.real, x_pi.imag
        x[6:8] = v_bus.real, v_bus.imag
        x[8:10] = x_v.real, x_v.imag
        x[10] = delta
        if self.sync == "droop":
            x[self._i_sync] = p_h
            x[self._i_sync + 1] = q_h
        else:
            x[self._i_sync] = 1.0
            x[self._i_sync + 1] = v_mag     # psi_v * omega_vsm = |v|
        self._check_flat(self.derivatives(x, v_bus, i_inj, base))
        return x

    def _pfr_shift(self, x) -> float:
        if self.pfr is None:
            return 0.0
        return ctl.pfr_output(
            ctl.PfrState(x[self._i_pfr], x[self._i_pfr + 1]), self.pfr)

    def _sync_and_vref(self, x, p_h, q_h, v_mag, omega_meas):
        """Synchronization and voltage-reference block evaluation.

        Returns (delta_dot, v_ref, (sync state derivatives)).
        """
        shift = self._pfr_shift(x)
        if self.sync == "droop":
            params = self.droop if shift == 0.0 else \
                replace(self.droop, pref=self.droop.pref + shift)
            state = ctl.DroopState(P=x[self._i_sync], Q=x[self._i_sync + 1],
                                   delta=x[10])
            delta_dot, p_dot = ctl.pf_droop_derivatives(
                state, params, p_h, omega_meas)
            v_ref, q_dot = ctl.qv_droop_vref(state, params, q_h)
            return delta_dot, v_ref, (p_dot, q_dot)
        params = self.vsm if shift == 0.0 else \
            replace(self.vsm, pref=self.vsm.pref + shift)
        state = ctl.VsmState(delta=x[10], omega_vsm=x[self._i_sync],
                             psi_v=x[self._i_sync + 1])
        delta_dot, omega_dot = ctl.vsm_derivatives(state, params, p_h, omega_meas)
        v_ref, psi_dot = ctl.vsm_voltage_vref(state, params, q_h, v_mag)
        return delta_dot, v_ref, (omega_dot, psi_dot)

    def derivatives(self, x, v_bus, i_net, base):
        omega_n = base.omega_n
        v_o = complex(x[2], x[3])
        v_f = complex(x[6], x[7])
        omega_meas = self.washout.measure(v_o, v_f, omega_n)
        s = v_o * i_net.conjugate()
        delta = x[10]
        rot = cmath.exp(-1j * delta)
        v_loc = rot * v_o
        i_loc = rot * complex(x[0], x[1])

        delta_dot, v_ref, sync_dots = self._sync_and_vref(
            x, s.real, s.imag, abs(v_o), omega_meas)
        i_ref, x_v_dot = ctl.gfm_voltage_ctrl(
            ctl.GfmVoltageState(complex(x[8], x[9])), self.voltage_ctrl,
            v_ref, v_loc)
        v_t_loc, x_pi_dot = ctl.pi_current_output(
            ctl.PICurrentState(complex(x[4], x[5])), self.current_ctrl,
            i_ref, i_loc, v_loc)

        di, dv = self._filter_derivs(x, v_t_loc / rot, i_net, omega_n)
        dvf = self.washout.deriv(v_o, v_f)

        dx = np.empty(self.n_states)
        dx[0:2] = di.real, di.imag
        dx[2:4] = dv.real, dv.imag
        dx[4:6] = x_pi_dot.real, x_pi_dot.imag
        dx[6:8] = dvf.real, dvf.imag
        dx[8:10] = x_v_dot.real, x_v_dot.imag
        dx[10] = omega_n * delta_dot
        dx[self._i_sync] = sync_dots[0]
        dx[self._i_sync + 1] = sync_dots[1]
        if self.pfr is not None:
            freq_in = omega_meas if self.pfr_input == "bus" else omega_meas - delta_dot
            _, (dlp, dwash) = ctl.pfr_step(
                ctl.PfrState(x[self._i_pfr], x[self._i_pfr + 1]), self.pfr,
                freq_in)
            dx[self._i_pfr] = dlp
            dx[self._i_pfr + 1] = dwash
        return dx

    def outputs(self, x, v_bus, i_net, base):
        out = self._base_outputs(x, i_net, base)
        v_o = complex(x[2], x[3])
        delta_dot, v_ref, _ = self._sync_and_vref(
            x, out["p"], out["q"], abs(v_o), out["omega_meas"])
        out.update({"delta": x[10], "delta_dot": delta_dot,
                    "x_v_d": x[8], "x_v_q": x[9],
                    "v_ref_d": v_ref.real, "v_ref_q": v_ref.imag})
        if self.sync == "droop":
            out.update({"P_filt": x[self._i_sync],
                        "Q_filt": x[self._i_sync + 1]})
        else:
            out.update({"omega_vsm": x[self._i_sync],
                        "psi_v": x[self._i_sync + 1]})
        if self.pfr is not None:
            out["pfr_out"] = self._pfr_shift(x)
        return out
