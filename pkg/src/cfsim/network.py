"""Static network model: buses, branches, admittance matrix, power flow.

The network is desk scale (tens of buses), so everything is dense.  Values
are per unit on the system MVA base; the dataset file format is documented
in :func:`load_network`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DisconnectedGraph, DuplicateBus, NonConvergence,
                     ParseError, ValidationError)

SLACK, PV, PQ = "slack", "pv", "pq"


@dataclass
class Bus:
    bus_id: int
    base_kv: float = 230.0
    btype: str = PQ
    v_set: float = 1.0          # voltage setpoint for slack/PV buses
    p_sched: float = 0.0        # net scheduled active injection (gen - load)
    q_sched: float = 0.0
    p_load: float = 0.0         # nominal load, kept for device construction
    q_load: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0


@dataclass
class MachineData:
    """Row of the synchronous-machine table shipped with a dataset."""

    bus: int
    h: float                    # inertia constant, s (M = 2H)
    xd: float
    xd_p: float
    xq: float
    xq_p: float
    td0_p: float
    tq0_p: float
    d: float = 0.0


@dataclass
class NetworkModel:
    buses: list[Bus] = field(default_factory=list)
    branches: list[Branch] = field(default_factory=list)
    machines: list[MachineData] = field(default_factory=list)
    base_mva: float = 100.0
    f_hz: float = 60.0

    def __post_init__(self) -> None:
        seen = set()
        for bus in self.buses:
            if bus.bus_id in seen:
                raise DuplicateBus(f"bus id {bus.bus_id} appears twice")
            seen.add(bus.bus_id)
        self._index = {bus.bus_id: k for k, bus in enumerate(self.buses)}
        self._ybus = None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index_of(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise ValidationError(f"unknown bus id {bus_id}") from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index_of(bus_id)]

    @property
    def ybus(self) -> np.ndarray:
        if self._ybus is None:
            self._ybus = build_ybus(self)
        return self._ybus

    def invalidate_ybus(self) -> None:
        self._ybus = None


def build_ybus(model: NetworkModel) -> np.ndarray:
    """Assemble the dense bus admittance matrix from pi-model branches.

    Off-nominal (real) taps are on the from side.  With no branches the
    matrix is all-zero.
    """
    n = model.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        if br.r == 0.0 and br.x == 0.0:
            raise ValidationError(
                f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        i = model.index_of(br.from_bus)
        j = model.index_of(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b
        tap = br.tap if br.tap else 1.0
        y[i, i] += (ys + ysh) / (tap * tap)
        y[j, j] += ys + ysh
        y[i, j] += -ys / tap
        y[j, i] += -ys / tap
    if model.branches:
        _check_connected(model)
    return y


def _check_connected(model: NetworkModel) -> None:
    adj: dict[int, set[int]] = {b.bus_id: set() for b in model.buses}
    for br in model.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen = {model.buses[0].bus_id}
    stack = [model.buses[0].bus_id]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if len(seen) != model.n_bus:
        missing = sorted(set(adj) - seen)
        raise DisconnectedGraph(f"buses {missing} are not connected to bus "
                                f"{model.buses[0].bus_id}")


@dataclass
class PowerFlowSolution:
    voltages: np.ndarray        # complex bus voltages, model order
    bus_power: np.ndarray       # complex net injection per bus
    mismatch_norm: float
    n_iter: int

    def voltage(self, model: NetworkModel, bus_id: int) -> complex:
        return complex(self.voltages[model.index_of(bus_id)])

    def power(self, model: NetworkModel, bus_id: int) -> complex:
        return complex(self.bus_power[model.index_of(bus_id)])


def solve_power_flow(model: NetworkModel, v0: np.ndarray | None = None,
                     tol: float = 1e-10, max_iter: int = 20) -> PowerFlowSolution:
    """Newton-Raphson power flow in polar coordinates from a flat start.

    Converges when the largest scheduled-power mismatch is below ``tol``
    (pu).  Raises :class:`NonConvergence` with the mismatch trace otherwise.
    """
    n = model.n_bus
    types = [b.btype for b in model.buses]
    slack_idx = [k for k, t in enumerate(types) if t == SLACK]
    if len(slack_idx) != 1:
        raise ValidationError(f"exactly one slack bus required, got {len(slack_idx)}")
    pv_idx = [k for k, t in enumerate(types) if t == PV]
    pq_idx = [k for k, t in enumerate(types) if t == PQ]
    ang_idx = pv_idx + pq_idx            # unknown angles
    mag_idx = pq_idx                     # unknown magnitudes

    ybus = model.ybus
    p_sched = np.array([b.p_sched for b in model.buses])
    q_sched = np.array([b.q_sched for b in model.buses])

    if v0 is not None:
        v = np.asarray(v0, dtype=complex).copy()
        vm, va = np.abs(v), np.angle(v)
    else:
        vm = np.array([b.v_set if b.btype in (SLACK, PV) else 1.0
                       for b in model.buses])
        va = np.zeros(n)

    trace: list[float] = []
    n_iter = 0
    for _ in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(ybus @ v)
        dp = p_sched - s_calc.real
        dq = q_sched - s_calc.imag
        mism = np.concatenate([dp[ang_idx], dq[mag_idx]])
        norm = float(np.max(np.abs(mism))) if mism.size else 0.0
        trace.append(norm)
        if norm < tol:
            return PowerFlowSolution(voltages=v, bus_power=s_calc,
                                     mismatch_norm=norm, n_iter=n_iter)
        if n_iter >= max_iter:
            break
        jac = _pf_jacobian(ybus, v, ang_idx, mag_idx)
        step = np.linalg.solve(jac, mism)
        va[ang_idx] += step[:len(ang_idx)]
        vm[mag_idx] += step[len(ang_idx):]
        n_iter += 1
    raise NonConvergence(
        f"power flow did not reach {tol} in {max_iter} iterations "
        f"(last mismatch {trace[-1]:.3e})", trace=trace)


def _pf_jacobian(ybus: np.ndarray, v: np.ndarray, ang_idx: list[int],
                 mag_idx: list[int]) -> np.ndarray:
    """Polar power-flow Jacobian [[dP/da, dP/dVm], [dQ/da, dQ/dVm]]."""
    ibus = ybus @ v
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_e = np.diag(v / np.abs(v))
    # complex power sensitivities (standard dense formulation)
    ds_da = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    ds_dvm = diag_v @ np.conj(ybus @ diag_e) + np.conj(diag_i) @ diag_e

    j11 = ds_da[np.ix_(ang_idx, ang_idx)].real
    j12 = ds_dvm[np.ix_(ang_idx, mag_idx)].real
    j21 = ds_da[np.ix_(mag_idx, ang_idx)].imag
    j22 = ds_dvm[np.ix_(mag_idx, mag_idx)].imag
    return np.block([[j11, j12], [j21, j22]])


def network_residual(model: NetworkModel, voltages: np.ndarray,
                     injections: np.ndarray) -> np.ndarray:
    """Current balance per bus: sum of device injections minus Ybus*V."""
    voltages = np.asarray(voltages, dtype=complex)
    injections = np.asarray(injections, dtype=complex)
    if voltages.shape != (model.n_bus,) or injections.shape != (model.n_bus,):
        raise ValidationError("voltage/injection vectors must match the bus count")
    return injections - model.ybus @ voltages


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def load_network(path_or_text: str, *, is_text: bool = False,
                 name: str = "<network>") -> NetworkModel:
    """Parse a plain-text network dataset.

    Format: one record per line, ``#`` comments, blank lines ignored.

    =========  =====================================================
    record     fields
    =========  =====================================================
    base_mva   value
    f_hz       value
    bus        id base_kv type(slack|pv|pq) [v_set= p_gen= p_load= q_load=]
    branch     from to r x b [tap=]
    machine    bus H xd xd_p xq xq_p td0_p tq0_p [d=]
    =========  =====================================================

    Scheduled bus powers are derived as generation minus load; machine rows
    carry the dynamic data consumed by the device layer.
    """
    if is_text:
        text, src = path_or_text, name
    else:
        src = str(path_or_text)
        with open(path_or_text, "r", encoding="utf-8") as fh:
            text = fh.read()

    buses: list[Bus] = []
    branches: list[Branch] = []
    machines: list[MachineData] = []
    base_mva, f_hz = 100.0, 60.0
    gen_sched: dict[int, complex] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind, args = tokens[0].lower(), tokens[1:]
        pos, kw = _split_kw(args, src, lineno)
        try:
            if kind == "base_mva":
                base_mva = float(pos[0])
            elif kind == "f_hz":
                f_hz = float(pos[0])
            elif kind == "bus":
                buses.append(Bus(
                    bus_id=int(pos[0]), base_kv=float(pos[1]),
                    btype=pos[2].lower(),
                    v_set=float(kw.get("v_set", 1.0)),
                    p_load=float(kw.get("p_load", 0.0)),
                    q_load=float(kw.get("q_load", 0.0))))
                gen_sched[int(pos[0])] = complex(float(kw.get("p_gen", 0.0)),
                                                 float(kw.get("q_gen", 0.0)))
                if buses[-1].btype not in (SLACK, PV, PQ):
                    raise ParseError(f"unknown bus type {pos[2]!r}", src, lineno)
            elif kind == "branch":
                branches.append(Branch(
                    from_bus=int(pos[0]), to_bus=int(pos[1]), r=float(pos[2]),
                    x=float(pos[3]), b=float(pos[4]) if len(pos) > 4 else 0.0,
                    tap=float(kw.get("tap", 1.0))))
            elif kind == "machine":
                machines.append(MachineData(
                    bus=int(pos[0]), h=float(pos[1]), xd=float(pos[2]),
                    xd_p=float(pos[3]), xq=float(pos[4]), xq_p=float(pos[5]),
                    td0_p=float(pos[6]), tq0_p=float(pos[7]),
                    d=float(kw.get("d", 0.0))))
            else:
                raise ParseError(f"unknown record {kind!r}", src, lineno)
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad {kind} record: {exc}", src, lineno) from exc

    for bus in buses:
        gen = gen_sched.get(bus.bus_id, 0j)
        bus.p_sched = gen.real - bus.p_load
        bus.q_sched = gen.imag - bus.q_load
    return NetworkModel(buses=buses, branches=branches, machines=machines,
                        base_mva=base_mva, f_hz=f_hz)


def _split_kw(args: list[str], src: str, lineno: int):
    pos, kw = [], {}
    for tok in args:
        if "=" in tok:
            key, _, val = tok.partition("=")
            if not key or not val:
                raise ParseError(f"malformed field {tok!r}", src, lineno)
            kw[key.lower()] = val
        elif kw:
            raise ParseError(f"positional field {tok!r} after keyword fields",
                             src, lineno)
        else:
            pos.append(tok)
    return pos, kw
