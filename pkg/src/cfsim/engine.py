"""Fixed-step implicit DAE integration of devices against the network.

The unknown vector per step is z = [device states | bus voltages | extra
algebraic currents].  Differential states advance with the trapezoidal
rule; bus equations are either current balances or, at buses whose voltage
is pinned by a device (converter filter capacitor, ideal slack), voltage
constraints.  The Newton iteration reuses a cached finite-difference
Jacobian and refreshes it on stalls or discrete events.

Determinism: no randomness, no threading; identical scenarios produce
bit-identical trajectories.
"""

from __future__ import annotations

import copy
import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cf import NominalBase
from .devices import Device, SyncMachine4
from .errors import (InitializationInfeasible, SolverError,
                     StepNonConvergence, ValidationError)
from .network import NetworkModel, solve_power_flow

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 15


@dataclass
class Event:
    """Timed discrete action: connect/disconnect a device or set a parameter."""

    time: float
    action: str                 # disconnect | connect | set
    target: str                 # device name, or device.param.path for set
    value: float | None = None

    def __post_init__(self):
        if self.action not in ("disconnect", "connect", "set"):
            raise ValidationError(f"unknown event action {self.action!r}")
        if self.action == "set" and self.value is None:
            raise ValidationError(f"event 'set {self.target}' needs a value")


@dataclass
class Scenario:
    """Everything needed for one reproducible run."""

    network: NetworkModel
    devices: list[Device]
    t_end: float = 5.0
    dt: float = 1e-3
    events: list[Event] = field(default_factory=list)
    sweep: tuple[str, list[float]] | None = None
    outputs: list[str] | None = None        # channel selectors, None = all
    record_every: int = 1
    name: str = "scenario"

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0.0:
            raise ValidationError(f"t_end must be >= 0, got {self.t_end}")
        for ev in self.events:
            if not 0.0 <= ev.time <= self.t_end:
                raise ValidationError(
                    f"event at t={ev.time} outside [0, {self.t_end}]")
        if self.sweep is not None:
            _, values = self.sweep
            if not all(math.isfinite(v) for v in values):
                raise ValidationError("sweep values must be finite")

    def copy(self) -> "Scenario":
        return copy.deepcopy(self)

    def device(self, name: str) -> Device:
        for dev in self.devices:
            if dev.name == name:
                return dev
        raise ValidationError(f"unknown device {name!r}")


@dataclass
class SystemState:
    t: float
    x: np.ndarray               # differential states, engine layout
    v: np.ndarray               # complex bus voltages
    alg: np.ndarray             # complex algebraic device currents


@dataclass
class TimeSeries:
    """Uniformly sampled named channels plus event metadata."""

    time: np.ndarray
    channels: dict[str, np.ndarray]
    dt: float
    event_times: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.channels.items():
            if len(arr) != len(self.time):
                raise ValidationError(f"channel {name!r} length mismatch")

    def channel(self, name: str) -> np.ndarray:
        from .errors import MissingChannel
        try:
            return self.channels[name]
        except KeyError:
            raise MissingChannel(f"channel {name!r} not recorded") from None

    def select(self, patterns: list[str]) -> list[str]:
        names = []
        for pat in patterns:
            hits = fnmatch.filter(self.channels.keys(), pat)
            names.extend(sorted(h for h in hits if h not in names))
        return names


class Simulator:
    """Owns the state layout, the Newton solver, and the recorder."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.net = scenario.network
        self.base = NominalBase(f_n=self.net.f_hz)
        self.devices = scenario.devices
        self._layout()
        self._jac_lu = None
        self._f_prev: np.ndarray | None = None
        self.state: SystemState | None = None

    # ------------------------------------------------------------------
    # layout and residual assembly
    # ------------------------------------------------------------------

    def _layout(self) -> None:
        self.n_bus = self.net.n_bus
        self._x_slices: list[slice] = []
        self._alg_index: list[int] = []
        pinner_at_bus: dict[int, Device] = {}
        pos = 0
        n_alg = 0
        for dev in self.devices:
            self._x_slices.append(slice(pos, pos + dev.n_states))
            pos += dev.n_states
            if dev.pins_voltage:
                k = self.net.index_of(dev.bus)
                if k in pinner_at_bus:
                    raise ValidationError(
                        f"devices {pinner_at_bus[k].name} and {dev.name} both "
                        f"pin the voltage of bus {dev.bus}")
                pinner_at_bus[k] = dev
            if dev.n_alg:
                self._alg_index.append(n_alg)
                n_alg += 1
            else:
                self._alg_index.append(-1)
            self.net.index_of(dev.bus)      # validates the bus id
        self.n_x = pos
        self.n_alg = n_alg
        self._pinner_at_bus = pinner_at_bus
        self.n_z = self.n_x + 2 * self.n_bus + 2 * self.n_alg

    def _pack(self, state: SystemState) -> np.ndarray:
        z = np.empty(self.n_z)
        z[:self.n_x] = state.x
        z[self.n_x:self.n_x + 2 * self.n_bus:2] = state.v.real
        z[self.n_x + 1:self.n_x + 2 * self.n_bus:2] = state.v.imag
        if self.n_alg:
            z[self.n_x + 2 * self.n_bus::2] = state.alg.real
            z[self.n_x + 2 * self.n_bus + 1::2] = state.alg.imag
        return z

    def _unpack(self, z: np.ndarray, t: float) -> SystemState:
        v = z[self.n_x:self.n_x + 2 * self.n_bus:2] + \
            1j * z[self.n_x + 1:self.n_x + 2 * self.n_bus:2]
        if self.n_alg:
            alg = z[self.n_x + 2 * self.n_bus::2] + \
                1j * z[self.n_x + 2 * self.n_bus + 1::2]
        else:
            alg = np.zeros(0, dtype=complex)
        return SystemState(t=t, x=z[:self.n_x].copy(), v=v, alg=alg)

    def _eval_devices(self, z: np.ndarray):
        """Device derivatives and injections at an unknown vector.

        Returns (f, inj, i_net_by_dev) where ``inj`` excludes the balancing
        currents absorbed by voltage-pinning devices.
        """
        x = z[:self.n_x]
        v = z[self.n_x:self.n_x + 2 * self.n_bus:2] + \
            1j * z[self.n_x + 1:self.n_x + 2 * self.n_bus:2]
        yv = self.net.ybus @ v
        inj = np.zeros(self.n_bus, dtype=complex)
        for dev, sl, ai in zip(self.devices, self._x_slices, self._alg_index):
            k = self.net.index_of(dev.bus)
            if dev.pins_voltage:
                continue
            if ai >= 0:
                off = self.n_x + 2 * self.n_bus + 2 * ai
                inj[k] += complex(z[off], z[off + 1])
            else:
                inj[k] += dev.injection(x[sl], complex(v[k]), self.base)
        f = np.empty(self.n_x)
        i_net_by_dev: list[complex | None] = []
        for dev, sl in zip(self.devices, self._x_slices):
            k = self.net.index_of(dev.bus)
            if dev.pins_voltage:
                i_net = complex(yv[k] - inj[k])
                i_net_by_dev.append(i_net)
            else:
                i_net = None
                i_net_by_dev.append(None)
            if dev.n_states:
                f[sl] = dev.derivatives(x[sl], complex(v[k]), i_net, self.base)
        return f, inj, i_net_by_dev, v, yv

    def _residual(self, z: np.ndarray, x_prev: np.ndarray, f_prev: np.ndarray,
                  dt: float) -> np.ndarray:
        f, inj, _, v, yv = self._eval_devices(z)
        res = np.empty(self.n_z)
        res[:self.n_x] = z[:self.n_x] - x_prev - 0.5 * dt * (f + f_prev)
        x = z[:self.n_x]
        for k in range(self.n_bus):
            off = self.n_x + 2 * k
            pinner = self._pinner_at_bus.get(k)
            if pinner is not None:
                want = pinner.pinned_voltage(x[self._x_slices[self.devices.index(pinner)]])
                res[off] = v[k].real - want.real
                res[off + 1] = v[k].imag - want.imag
            else:
                bal = inj[k] - yv[k]
                res[off] = bal.real
                res[off + 1] = bal.imag
        for dev, sl, ai in zip(self.devices, self._x_slices, self._alg_index):
            if ai < 0:
                continue
            off = self.n_x + 2 * self.n_bus + 2 * ai
            k = self.net.index_of(dev.bus)
            r1, r2 = dev.alg_residual(x[sl], complex(v[k]),
                                      complex(z[off], z[off + 1]))
            res[off] = r1
            res[off + 1] = r2
        return res

    def _alg_residual_only(self, z: np.ndarray) -> np.ndarray:
        """Bus and constraint equations with differential states frozen."""
        full = self._residual(z, z[:self.n_x], np.zeros(self.n_x), 1.0)
        return full[self.n_x:]

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------

    def initialize(self) -> SystemState:
        """Power flow, device back-solve, equilibrium verification."""
        pf = solve_power_flow(self.net)
        v = pf.voltages.copy()

        # split the solved bus power among devices: scheduled devices take
        # their schedule, the single balancing device per bus takes the rest
        remaining = pf.bus_power.astype(complex).copy()
        balancing: dict[int, Device] = {}
        for dev in self.devices:
            k = self.net.index_of(dev.bus)
            sched = getattr(dev, "sched", None)
            if sched is not None:
                remaining[k] -= sched
            else:
                if k in balancing:
                    raise ValidationError(
                        f"buses cannot host two balancing devices "
                        f"({balancing[k].name}, {dev.name})")
                balancing[k] = dev

        x = np.zeros(self.n_x)
        alg = np.zeros(self.n_alg, dtype=complex)
        for dev, sl, ai in zip(self.devices, self._x_slices, self._alg_index):
            k = self.net.index_of(dev.bus)
            sched = getattr(dev, "sched", None)
            s_dev = complex(remaining[k]) if sched is None else complex(sched)
            x[sl] = dev.init_from_power_flow(complex(v[k]), s_dev, self.base)
            if ai >= 0:
                alg[ai] = dev.init_alg(complex(v[k]))
        for k, s_left in enumerate(remaining):
            if k not in balancing and abs(s_left) > 1e-7:
                raise ValidationError(
                    f"bus {self.net.buses[k].bus_id}: scheduled device powers "
                    f"leave {s_left:.2e} pu unassigned")

        self.state = SystemState(t=0.0, x=x, v=v, alg=alg)
        self.verify_equilibrium(self.state)
        z = self._pack(self.state)
        self._f_prev = self._eval_devices(z)[0]
        self._jac_lu = None
        return self.state

    def verify_equilibrium(self, state: SystemState) -> None:
        z = self._pack(state)
        f, inj, i_net_by_dev, v, yv = self._eval_devices(z)
        for dev, sl in zip(self.devices, self._x_slices):
            if dev.n_states and float(np.max(np.abs(f[sl]))) > 1e-8:
                raise InitializationInfeasible(
                    f"device {dev.name}: max |state derivative| = "
                    f"{float(np.max(np.abs(f[sl]))):.3e} at t={state.t}")
        res = self._alg_residual_only(z)
        if float(np.max(np.abs(res))) > 1e-8:
            raise InitializationInfeasible(
                f"network residual {float(np.max(np.abs(res))):.3e} at init")

    # ------------------------------------------------------------------
    # stepping
    # ------------------------------------------------------------------

    def _fd_jacobian(self, z: np.ndarray, x_prev, f_prev, dt) -> np.ndarray:
        f0 = self._residual(z, x_prev, f_prev, dt)
        jac = np.empty((self.n_z, self.n_z))
        for j in range(self.n_z):
            h = 1e-7 * (1.0 + abs(z[j]))
            zp = z.copy()
            zp[j] += h
            jac[:, j] = (self._residual(zp, x_prev, f_prev, dt) - f0) / h
        return jac

    def step(self, dt: float | None = None) -> SystemState:
        """One trapezoidal step with chord-Newton iteration."""
        if self.state is None:
            raise SolverError("simulator not initialized")
        dt = self.scenario.dt if dt is None else dt
        x_prev = self.state.x.copy()
        f_prev = self._f_prev
        z = self._pack(self.state)
        refreshed = False
        prev_norm = math.inf
        for it in range(NEWTON_MAX_ITER):
            res = self._residual(z, x_prev, f_prev, dt)
            norm = float(np.max(np.abs(res)))
            if norm < NEWTON_TOL:
                self.state = self._unpack(z, self.state.t + dt)
                self._f_prev = self._eval_devices(z)[0]
                return self.state
            stalling = norm > 0.5 * prev_norm
            if self._jac_lu is None or (stalling and not refreshed and it > 0):
                self._jac_lu = scipy.linalg.lu_factor(
                    self._fd_jacobian(z, x_prev, f_prev, dt))
                refreshed = True
            prev_norm = norm
            z = z - scipy.linalg.lu_solve(self._jac_lu, res)
        raise StepNonConvergence(
            f"no convergence at t={self.state.t + dt:.6f} after "
            f"{NEWTON_MAX_ITER} iterations (residual {prev_norm:.3e}); "
            f"consider reducing dt")

    def resolve_algebraics(self) -> None:
        """Re-solve bus voltages / algebraic currents with frozen states."""
        z = self._pack(self.state)
        n_red = self.n_z - self.n_x
        for it in range(NEWTON_MAX_ITER):
            res = self._alg_residual_only(z)
            norm = float(np.max(np.abs(res)))
            if norm < NEWTON_TOL:
                self.state = self._unpack(z, self.state.t)
                self._f_prev = self._eval_devices(z)[0]
                self._jac_lu = None         # structure may have changed
                return
            f0 = res
            jac = np.empty((n_red, n_red))
            for j in range(n_red):
                h = 1e-7 * (1.0 + abs(z[self.n_x + j]))
                zp = z.copy()
                zp[self.n_x + j] += h
                jac[:, j] = (self._alg_residual_only(zp) - f0) / h
            z[self.n_x:] -= np.linalg.solve(jac, res)
        raise StepNonConvergence(
            f"algebraic re-solve failed at t={self.state.t:.6f}")

    def apply_event(self, event: Event) -> SystemState:
        """Discrete change followed by an algebraic re-solve.

        Differential states are continuous across the event.
        """
        if event.action in ("disconnect", "connect"):
            dev = self.scenario.device(event.target)
            if dev.pins_voltage:
                raise ValidationError(
                    f"cannot switch {dev.name}: it pins bus {dev.bus} voltage")
            dev.connected = event.action == "connect"
        else:
            name, _, path = event.target.partition(".")
            self.scenario.device(name).set_param(path, event.value)
        self.resolve_algebraics()
        return self.state

    # ------------------------------------------------------------------
    # full runs
    # ------------------------------------------------------------------

    def _probe_channels(self) -> dict[str, float]:
        z = self._pack(self.state)
        _, inj, i_net_by_dev, v, yv = self._eval_devices(z)
        chan: dict[str, float] = {}
        for k, bus in enumerate(self.net.buses):
            chan[f"bus{bus.bus_id}.v_d"] = v[k].real
            chan[f"bus{bus.bus_id}.v_q"] = v[k].imag
        total_inj = inj.copy()
        for dev, sl, i_net in zip(self.devices, self._x_slices, i_net_by_dev):
            k = self.net.index_of(dev.bus)
            out = dev.outputs(self.state.x[sl], complex(v[k]),
                              i_net if i_net is not None else 0j, self.base)
            for key, val in out.items():
                chan[f"{dev.name}.{key}"] = val
            if i_net is not None:
                total_inj[k] += i_net
        machines = [(d, sl) for d, sl in zip(self.devices, self._x_slices)
                    if isinstance(d, SyncMachine4)]
        if machines:
            m_sum = sum(d.m for d, _ in machines)
            chan["coi.omega"] = sum(
                d.m * self.state.x[sl][1] for d, sl in machines) / m_sum
        resid = total_inj - yv
        chan["sys.residual_max"] = float(np.max(np.abs(resid)))
        chan["sys.power_balance"] = abs(complex(np.sum(v * np.conj(resid))))
        return chan

    def run(self) -> TimeSeries:
        """Integrate the scenario and record channels on the output grid."""
        if self.state is None:
            self.initialize()
        sc = self.scenario
        n_steps = int(round(sc.t_end / sc.dt))
        events = sorted(sc.events, key=lambda e: e.time)
        ev_steps = [int(round(e.time / sc.dt)) for e in events]

        rec_idx = list(range(0, n_steps + 1, max(1, sc.record_every)))
        if rec_idx[-1] != n_steps:
            rec_idx.append(n_steps)
        names = list(self._probe_channels().keys())
        data = {name: np.empty(len(rec_idx)) for name in names}
        times = np.array([i * sc.dt for i in rec_idx])
        rec_pos = 0
        event_times: list[float] = []

        for i in range(n_steps + 1):
            while events and ev_steps[0] == i:
                ev = events.pop(0)
                ev_steps.pop(0)
                self.apply_event(ev)
                event_times.append(i * sc.dt)
            if rec_pos < len(rec_idx) and rec_idx[rec_pos] == i:
                snap = self._probe_channels()
                for name in names:
                    data[name][rec_pos] = snap[name]
                rec_pos += 1
            if i < n_steps:
                self.step(sc.dt)

        if sc.outputs:
            keep = set()
            for pat in sc.outputs:
                keep.update(fnmatch.filter(data.keys(), pat))
            data = {k: v for k, v in data.items() if k in keep}
        return TimeSeries(time=times, channels=data, dt=sc.dt,
                          event_times=event_times,
                          meta={"scenario": sc.name})


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------

def initialize(scenario: Scenario) -> SystemState:
    return Simulator(scenario).initialize()


def run(scenario: Scenario) -> TimeSeries:
    return Simulator(scenario).run()


@dataclass
class SweepRun:
    value: float
    result: TimeSeries | None
    error: str | None = None


def run_sweep(scenario: Scenario) -> list[SweepRun]:
    """One independent run per sweep value (single run if no sweep).

    Each run uses a deep copy of the scenario, so results are identical to
    running each configuration alone; per-run failures are collected
    without aborting the remaining values.
    """
    if scenario.sweep is None:
        ts = run(scenario.copy())
        return [SweepRun(value=math.nan, result=ts)]
    path, values = scenario.sweep
    name, _, param = path.partition(".")
    runs: list[SweepRun] = []
    for val in values:
        sc = scenario.copy()
        sc.sweep = None
        sc.device(name).set_param(param, val)
        sc.name = f"{scenario.name}[{path}={val:g}]"
        try:
            ts = run(sc)
            ts.meta["sweep_param"] = path
            ts.meta["sweep_value"] = val
            runs.append(SweepRun(value=val, result=ts))
        except Exception as exc:            # collected, not fatal to siblings
            runs.append(SweepRun(value=val, result=None, error=str(exc)))
    return runs
