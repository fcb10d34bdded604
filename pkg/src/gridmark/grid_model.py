"""Microgrid network and inverter model: power flow, DAE, linearization.

Buses are numbered 1..bus_count everywhere a user sees them (config files,
error messages); internal arrays are 0-based.  Per-unit normalization uses
the network nominal voltage and an explicit power base from the model file;
branch impedances are given in ohms and converted at load time.  Angles are
radians, frequencies absolute rad/s, every electrical quantity per-unit.

State ordering of the assembled DAE is DGU-major, 7 states per DGU in the
order of the dgus list:

    [w_m, V_m, th_m, gamma_d, gamma_q, i_d, i_q]

w_m / V_m are the outputs of the frequency / voltage measurement filters
(the sensor stream the droop and the detectors consume), th_m the tracked
bus angle, gamma the current-controller integrators (equal to the
modulation index at rest), i the injected current in the common dq frame.

Algebraic vector y stacks [V at free buses..., theta at free buses...]
where "free" means not held by a fixed-voltage source.  Sources are
substituted as constants, which is also what breaks the global angle-shift
symmetry; a network without any source keeps that symmetry, so its
algebraic Jacobian is singular and linearize() refuses it.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import yaml


class ModelConfigError(ValueError):
    """Bad network/DGU/load configuration."""


class PowerFlowError(RuntimeError):
    def __init__(self, msg, residual=None, history=None):
        super().__init__(msg)
        self.residual = residual
        self.history = history or []


class EquilibriumError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.residual_history = history or []


class LinearizationError(RuntimeError):
    pass


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    conductance: float      # series admittance, per-unit
    susceptance: float


@dataclass
class SourceBus:
    bus: int
    voltage: float          # pu magnitude, held fixed
    angle: float = 0.0      # rad, held fixed


@dataclass
class DguModel:
    bus: int
    T_omega: float
    T_V: float
    T_theta: float
    alpha_p: float
    beta_p: float
    alpha_q: float
    beta_q: float
    K_p1: float             # d-axis current PI, volts per ampere
    K_i1: float
    K_p2: float             # q-axis
    K_i2: float
    V_dc: float             # volts
    R_in: float             # ohms
    L_in: float             # henries
    steady_P: float         # watts, active dispatch
    steady_Q: float = 0.0   # vars, used only by the open-loop power flow

    def __post_init__(self):
        if not (self.T_omega > 0 and self.T_V > 0 and self.T_theta > 0):
            raise ModelConfigError("measurement time constants must be positive")
        if not (self.L_in > 0 and self.V_dc > 0):
            raise ModelConfigError("L_in and V_dc must be positive")


@dataclass
class LoadModel:
    bus: int
    P_L: float              # watts
    Q_L: float              # vars


@dataclass
class NetworkModel:
    bus_count: int
    branches: list
    dgu_buses: list
    load_buses: list
    nominal_voltage: float
    nominal_frequency: float
    power_base: float
    sources: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for br in self.branches:
            for b in (br.from_bus, br.to_bus):
                if not 1 <= b <= self.bus_count:
                    raise ModelConfigError(
                        f"branch ({br.from_bus},{br.to_bus}) references bus {b}, "
                        f"valid range is 1..{self.bus_count}")
            if br.from_bus == br.to_bus:
                raise ModelConfigError(f"branch connects bus {br.from_bus} to itself")
        for b in list(self.dgu_buses) + list(self.load_buses):
            if not 1 <= b <= self.bus_count:
                raise ModelConfigError(f"bus index {b} out of range 1..{self.bus_count}")
        src = [s.bus for s in self.sources]
        if len(set(src)) != len(src):
            raise ModelConfigError("duplicate source bus")
        for s in self.sources:
            if s.bus in self.dgu_buses:
                raise ModelConfigError(f"bus {s.bus} cannot be both source and DGU")

    @property
    def z_base(self):
        return self.nominal_voltage ** 2 / self.power_base

    @property
    def i_base(self):
        return self.power_base / self.nominal_voltage


def load_network(path):
    """Read a network definition file -> (NetworkModel, [DguModel], [LoadModel]).

    Branch impedances are in ohms in the file and converted to per-unit
    admittances here.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "bus_count" not in raw:
        raise ModelConfigError(f"{path}: not a network definition file")
    v_base = float(raw["nominal_voltage"])
    s_base = float(raw["power_base"])
    z_base = v_base ** 2 / s_base

    branches = []
    for b in raw.get("branches", []):
        z = complex(float(b["resistance_ohm"]), float(b["reactance_ohm"])) / z_base
        if z == 0:
            raise ModelConfigError("branch with zero impedance")
        y = 1.0 / z
        branches.append(Branch(int(b["from_bus"]), int(b["to_bus"]), y.real, y.imag))

    sources = [SourceBus(int(s["bus"]), float(s.get("voltage_pu", 1.0)),
                         float(s.get("angle_rad", 0.0)))
               for s in raw.get("sources", [])]

    dgus = []
    for d in raw.get("dgus", []):
        dr = d.get("droop", {})
        cc = d.get("current_ctrl", {})
        dgus.append(DguModel(
            bus=int(d["bus"]),
            T_omega=float(d.get("filter_time_freq", 0.02)),
            T_V=float(d.get("filter_time_volt", 0.02)),
            T_theta=float(d.get("filter_time_angle", d.get("filter_time_volt", 0.02))),
            alpha_p=float(dr["alpha_p"]), beta_p=float(dr["beta_p"]),
            alpha_q=float(dr["alpha_q"]), beta_q=float(dr["beta_q"]),
            K_p1=float(cc["k_p1"]), K_i1=float(cc["k_i1"]),
            K_p2=float(cc.get("k_p2", cc["k_p1"])),
            K_i2=float(cc.get("k_i2", cc["k_i1"])),
            V_dc=float(d["dc_voltage"]),
            R_in=float(d["input_resistance_ohm"]),
            L_in=float(d["input_inductance_h"]),
            steady_P=float(d.get("dispatch_p_w", 0.0)),
            steady_Q=float(d.get("dispatch_q_var", 0.0)),
        ))
    seen = set()
    for d in dgus:
        if d.bus in seen:
            raise ModelConfigError(f"duplicate DGU on bus {d.bus}")
        seen.add(d.bus)

    loads = [LoadModel(int(l["bus"]), float(l["active_w"]), float(l["reactive_var"]))
             for l in raw.get("loads", [])]

    net = NetworkModel(
        bus_count=int(raw["bus_count"]),
        branches=branches,
        dgu_buses=[d.bus for d in dgus],
        load_buses=[l.bus for l in loads],
        nominal_voltage=v_base,
        nominal_frequency=float(raw["nominal_frequency"]),
        power_base=s_base,
        sources=sources,
        name=str(raw.get("name", "")),
    )
    return net, dgus, loads


def build_ybus(net):
    """Bus admittance matrix (complex, bus_count x bus_count), per-unit."""
    nb = net.bus_count
    Y = np.zeros((nb, nb), complex)
    for br in net.branches:
        f, t = br.from_bus - 1, br.to_bus - 1
        y = complex(br.conductance, br.susceptance)
        Y[f, f] += y
        Y[t, t] += y
        Y[f, t] -= y
        Y[t, f] -= y
    return Y


# ---------------------------------------------------------------------------
# power flow


@dataclass
class PowerFlowResult:
    v_mag: np.ndarray
    v_ang: np.ndarray
    iterations: int
    residual: float
    residual_history: list


def _injected_power(Y, V, th):
    Vc = V * np.exp(1j * th)
    S = Vc * np.conj(Y @ Vc)
    return S.real, S.imag


def solve_power_flow(net, injections, reference_bus=1, tol=1e-8, max_iter=40):
    """Newton power flow.  injections: complex per-unit power per bus (1-based
    order), generation positive.

    Fixed-voltage sources are held at their configured phasors.  Without any
    source, reference_bus serves as the slack: angle pinned to 0, magnitude
    1.0, injection floating.  All other buses are PQ.
    """
    nb = net.bus_count
    injections = np.asarray(injections, complex)
    if injections.shape != (nb,):
        raise ModelConfigError(f"injections must have length {nb}")
    Y = build_ybus(net)
    G, B = Y.real, Y.imag

    fixed = {s.bus - 1: (s.voltage, s.angle) for s in net.sources}
    if not fixed:
        fixed[reference_bus - 1] = (1.0, 0.0)
    pq = [b for b in range(nb) if b not in fixed]

    V = np.ones(nb)
    th = np.zeros(nb)
    for b, (vm, va) in fixed.items():
        V[b], th[b] = vm, va

    Psp, Qsp = injections.real, injections.imag
    history = []
    for it in range(max_iter + 1):
        Pc, Qc = _injected_power(Y, V, th)
        mis = np.concatenate([Psp[pq] - Pc[pq], Qsp[pq] - Qc[pq]])
        res = float(np.abs(mis).max()) if len(mis) else 0.0
        history.append(res)
        if res <= tol:
            return PowerFlowResult(V.copy(), th.copy(), it, res, history)
        if it == max_iter:
            break

        npq = len(pq)
        J = np.zeros((2 * npq, 2 * npq))
        for a, i in enumerate(pq):
            for c, k in enumerate(pq):
                if i == k:
                    J[a, c] = -Qc[i] - B[i, i] * V[i] ** 2                    # dP/dth
                    J[a, npq + c] = Pc[i] / V[i] + G[i, i] * V[i]             # dP/dV
                    J[npq + a, c] = Pc[i] - G[i, i] * V[i] ** 2               # dQ/dth
                    J[npq + a, npq + c] = Qc[i] / V[i] - B[i, i] * V[i]       # dQ/dV
                else:
                    d = th[i] - th[k]
                    gs = G[i, k] * math.sin(d) - B[i, k] * math.cos(d)
                    gc = G[i, k] * math.cos(d) + B[i, k] * math.sin(d)
                    J[a, c] = V[i] * V[k] * gs
                    J[a, npq + c] = V[i] * gc
                    J[npq + a, c] = -V[i] * V[k] * gc
                    J[npq + a, npq + c] = V[i] * gs
        try:
            step = np.linalg.solve(J, mis)
        except np.linalg.LinAlgError:
            raise PowerFlowError(f"singular power-flow Jacobian at iteration {it}",
                                 residual=res, history=history)
        th[pq] += step[:npq]
        V[pq] += step[npq:]

    raise PowerFlowError(
        f"power flow did not converge in {max_iter} iterations "
        f"(final residual {history[-1]:.3e})",
        residual=history[-1], history=history)


# ---------------------------------------------------------------------------
# nonlinear DAE


@dataclass
class DaeModel:
    """Nonlinear model: dx/dt = f(x, y, u_ref), 0 = g(x, y, u_load).

    u_ref stacks (P_ref, Q_ref) per DGU (per-unit), u_load stacks
    (P_L, Q_L) per load in list order (per-unit, consumption positive).
    outputs(x, y) returns the sensor stream (w_m, V_m per DGU).
    """
    f: object
    g: object
    outputs: object
    n_state: int
    n_alg: int
    n_cmd: int
    n_load: int
    n_out: int
    network: object = None
    dgus: list = None
    loads: list = None
    free_buses: list = None


def assemble_dae(net, dgus, loads):
    seen = set()
    for d in dgus:
        if d.bus in seen:
            raise ModelConfigError(f"duplicate DGU on bus {d.bus}")
        seen.add(d.bus)
        if not 1 <= d.bus <= net.bus_count:
            raise ModelConfigError(f"DGU bus {d.bus} not in network")
    for l in loads:
        if not 1 <= l.bus <= net.bus_count:
            raise ModelConfigError(f"load bus {l.bus} not in network")

    nb = net.bus_count
    w_n = net.nominal_frequency
    s_base, v_base = net.power_base, net.nominal_voltage
    z_base, i_base = net.z_base, net.i_base
    Y = build_ybus(net)
    Gm, Bm = Y.real, Y.imag

    fixed_idx = [s.bus - 1 for s in net.sources]
    fixed_v = np.array([s.voltage for s in net.sources])
    fixed_th = np.array([s.angle for s in net.sources])
    free = [b for b in range(nb) if b not in fixed_idx]
    nfree = len(free)
    pos = {b: i for i, b in enumerate(free)}

    n = len(dgus)
    m = len(loads)
    dgu_at = {d.bus - 1: k for k, d in enumerate(dgus)}

    # per-DGU constants in per-unit; current-controller gains are specified
    # per ampere of error, so scale by the current base
    kpi_d = np.array([d.K_p1 * i_base for d in dgus])
    kii_d = np.array([d.K_i1 * i_base for d in dgus])
    kpi_q = np.array([d.K_p2 * i_base for d in dgus])
    kii_q = np.array([d.K_i2 * i_base for d in dgus])
    vdc = np.array([d.V_dc / v_base for d in dgus])
    r_in = np.array([d.R_in / z_base for d in dgus])
    x_in = np.array([w_n * d.L_in / z_base for d in dgus])
    t_w = np.array([d.T_omega for d in dgus])
    t_v = np.array([d.T_V for d in dgus])
    t_th = np.array([d.T_theta for d in dgus])
    dgu_bus0 = [d.bus - 1 for d in dgus]

    def full_vth(y):
        dt = y.dtype if np.iscomplexobj(y) else float
        V = np.zeros(nb, dtype=dt)
        th = np.zeros(nb, dtype=dt)
        V[free] = y[:nfree]
        th[free] = y[nfree:]
        for i, b in enumerate(fixed_idx):
            V[b] = fixed_v[i]
            th[b] = fixed_th[i]
        return V, th

    def f(x, y, u_ref):
        dt = np.result_type(x, y, u_ref, float)
        dx = np.zeros(7 * n, dtype=dt)
        V, th = full_vth(np.asarray(y, dtype=dt))
        x = np.asarray(x, dtype=dt)
        u_ref = np.asarray(u_ref, dtype=dt)
        for k in range(n):
            b = dgu_bus0[k]
            w_m, V_m, th_m, g_d, g_q, i_d, i_q = x[7 * k:7 * k + 7]
            pref, qref = u_ref[2 * k], u_ref[2 * k + 1]
            # current reference in the common frame; the V_m magnitude cancels
            # out of the division form, leaving the rotation by th_m
            i_dref = pref * np.cos(th_m) + qref * np.sin(th_m)
            i_qref = pref * np.sin(th_m) - qref * np.cos(th_m)
            e_d = i_dref - i_d
            e_q = i_qref - i_q
            u_d = vdc[k] * (kpi_d[k] * e_d + g_d)
            u_q = vdc[k] * (kpi_q[k] * e_q + g_q)
            V_d = V[b] * np.cos(th[b])
            V_q = V[b] * np.sin(th[b])
            w_i = w_n + (th[b] - th_m) / t_th[k]
            dx[7 * k + 0] = (w_i - w_m) / t_w[k]
            dx[7 * k + 1] = (V[b] - V_m) / t_v[k]
            dx[7 * k + 2] = (th[b] - th_m) / t_th[k]
            dx[7 * k + 3] = kii_d[k] * e_d
            dx[7 * k + 4] = kii_q[k] * e_q
            # RL output stage, damped form
            dx[7 * k + 5] = (w_n / x_in[k]) * (u_d - V_d - r_in[k] * i_d) + w_n * i_q
            dx[7 * k + 6] = (w_n / x_in[k]) * (u_q - V_q - r_in[k] * i_q) - w_n * i_d
        return dx

    def g(x, y, u_load):
        dt = np.result_type(x, y, u_load, float)
        V, th = full_vth(np.asarray(y, dtype=dt))
        x = np.asarray(x, dtype=dt)
        u_load = np.asarray(u_load, dtype=dt)
        res = np.zeros(2 * nfree, dtype=dt)
        for i, b in enumerate(free):
            Pn = dt.type(0)
            Qn = dt.type(0)
            for c in range(nb):
                d = th[b] - th[c]
                Pn = Pn + V[b] * V[c] * (Gm[b, c] * np.cos(d) + Bm[b, c] * np.sin(d))
                Qn = Qn + V[b] * V[c] * (Gm[b, c] * np.sin(d) - Bm[b, c] * np.cos(d))
            res[2 * i] = -Pn
            res[2 * i + 1] = -Qn
            if b in dgu_at:
                k = dgu_at[b]
                i_d, i_q = x[7 * k + 5], x[7 * k + 6]
                V_d = V[b] * np.cos(th[b])
                V_q = V[b] * np.sin(th[b])
                res[2 * i] += V_d * i_d + V_q * i_q
                res[2 * i + 1] += V_q * i_d - V_d * i_q
        for j, l in enumerate(loads):
            b = l.bus - 1
            if b in pos:
                i = pos[b]
                res[2 * i] -= u_load[2 * j]
                res[2 * i + 1] -= u_load[2 * j + 1]
        return res

    def outputs(x, y):
        dt = np.result_type(x, y, float)
        out = np.zeros(2 * n, dtype=dt)
        for k in range(n):
            out[2 * k] = x[7 * k + 0]
            out[2 * k + 1] = x[7 * k + 1]
        return out

    return DaeModel(f=f, g=g, outputs=outputs,
                    n_state=7 * n, n_alg=2 * nfree, n_cmd=2 * n, n_load=2 * m,
                    n_out=2 * n, network=net, dgus=list(dgus), loads=list(loads),
                    free_buses=[b + 1 for b in free])


# ---------------------------------------------------------------------------
# equilibrium


@dataclass
class Equilibrium:
    bus_voltages: np.ndarray
    bus_angles: np.ndarray
    state_vector: np.ndarray
    input_vector: np.ndarray     # [u_ref0 (2n), u_load0 (2m)]
    alg_vector: np.ndarray
    n_dgu: int
    n_load: int
    residual_history: list = field(default_factory=list)

    @property
    def command_part(self):
        return self.input_vector[:2 * self.n_dgu]

    @property
    def load_part(self):
        return self.input_vector[2 * self.n_dgu:]


def find_equilibrium(model, setpoints=None, v_ref=1.0, tol=1e-8, max_iter=60):
    """Closed-loop rest point of the droop-regulated network.

    The voltage integrators hold V = v_ref exactly at every DGU bus in
    steady state, with the reactive injection falling out of the network
    equations; active injections equal the dispatch.  setpoints optionally
    overrides the per-DGU active dispatch (watts).

    Unknowns: V at free non-DGU buses and theta at all free buses.
    Equations: active-power balance at every free bus plus reactive-power
    balance at free non-DGU buses.  Solved by a least-squares Newton
    iteration, which also covers the source-free (angle-shift-symmetric)
    case where the system is consistent but rank-deficient.
    """
    net, dgus, loads = model.network, model.dgus, model.loads
    if net is None:
        raise ModelConfigError("find_equilibrium needs a model built by assemble_dae")
    nb = net.bus_count
    s_base = net.power_base
    n, m = len(dgus), len(loads)
    w_n = net.nominal_frequency

    P_disp = np.array([d.steady_P for d in dgus], float)
    if setpoints is not None:
        P_disp = np.asarray(setpoints, float)
        if P_disp.shape != (n,):
            raise ModelConfigError(f"setpoints must have length {n}")
    Ppu = P_disp / s_base

    S_load = np.zeros(nb, complex)
    for l in loads:
        S_load[l.bus - 1] += complex(l.P_L, l.Q_L) / s_base

    Y = build_ybus(net)
    fixed_idx = [s.bus - 1 for s in net.sources]
    free = [b for b in range(nb) if b not in fixed_idx]
    dgu_bus0 = [d.bus - 1 for d in dgus]
    other = [b for b in free if b not in dgu_bus0]   # free buses without a DGU

    def assemble(u):
        V = np.zeros(nb)
        th = np.zeros(nb)
        V[other] = u[:len(other)]
        th[free] = u[len(other):]
        for k in dgu_bus0:
            V[k] = v_ref
        for s in net.sources:
            V[s.bus - 1] = s.voltage
            th[s.bus - 1] = s.angle
        return V, th

    def residual(u):
        V, th = assemble(u)
        Vc = V * np.exp(1j * th)
        S = Vc * np.conj(Y @ Vc)
        r = []
        for k, b in enumerate(dgu_bus0):
            r.append(Ppu[k] - S_load[b].real - S[b].real)
        for b in other:
            r.append(-S_load[b].real - S[b].real)
            r.append(-S_load[b].imag - S[b].imag)
        return np.array(r)

    u = np.concatenate([np.ones(len(other)), np.zeros(len(free))])
    history = []
    for it in range(max_iter):
        r = residual(u)
        history.append(float(np.abs(r).max()))
        if history[-1] <= tol:
            break
        # central finite-difference Jacobian; the system is tiny
        J = np.zeros((len(r), len(u)))
        h = 1e-7
        for j in range(len(u)):
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            J[:, j] = (residual(up) - residual(um)) / (2 * h)
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        u = u - step
        if not np.all(np.isfinite(u)):
            raise EquilibriumError("equilibrium iteration produced non-finite values",
                                   history=history)
    else:
        raise EquilibriumError(
            f"no equilibrium found in {max_iter} iterations "
            f"(last residual {history[-1]:.3e})", history=history)

    V, th = assemble(u)
    Vc = V * np.exp(1j * th)
    S = Vc * np.conj(Y @ Vc)
    # reactive output of each DGU recovered from its bus balance
    Qg = np.array([S[b].imag + S_load[b].imag for b in dgu_bus0])

    x0 = np.zeros(7 * n)
    u_ref0 = np.zeros(2 * n)
    z_base, v_base = net.z_base, net.nominal_voltage
    for k, d in enumerate(dgus):
        b = dgu_bus0[k]
        Sg = Ppu[k] + 1j * Qg[k]
        iph = np.conj(Sg / Vc[b])
        uph = Vc[b] + complex(d.R_in / z_base, w_n * d.L_in / z_base) * iph
        vdc = d.V_dc / v_base
        x0[7 * k:7 * k + 7] = [w_n, V[b], th[b],
                               (uph / vdc).real, (uph / vdc).imag,
                               iph.real, iph.imag]
        # the command pair equals the injected current rotated into the
        # measured frame (the measured magnitude cancels out of the current
        # reference law); with V pinned to 1 this is (P, Q) exactly
        u_ref0[2 * k] = (iph * np.exp(-1j * th[b])).real
        u_ref0[2 * k + 1] = -(iph * np.exp(-1j * th[b])).imag
    u_load0 = np.zeros(2 * m)
    for j, l in enumerate(loads):
        u_load0[2 * j] = l.P_L / s_base
        u_load0[2 * j + 1] = l.Q_L / s_base

    nfree = len(free)
    y0 = np.zeros(2 * nfree)
    y0[:nfree] = V[free]
    y0[nfree:] = th[free]

    eq = Equilibrium(bus_voltages=V, bus_angles=th, state_vector=x0,
                     input_vector=np.concatenate([u_ref0, u_load0]),
                     alg_vector=y0, n_dgu=n, n_load=m,
                     residual_history=history)

    fres = float(np.abs(model.f(x0, y0, u_ref0)).max())
    gres = float(np.abs(model.g(x0, y0, u_load0)).max())
    if gres > 10 * tol or fres > 1e-6:
        raise EquilibriumError(
            f"equilibrium candidate fails substitution: |f|={fres:.3e} |g|={gres:.3e}",
            history=history)
    return eq


# ---------------------------------------------------------------------------
# linearization and discretization


@dataclass
class StateSpace:
    kind: str                   # "continuous" | "discrete"
    A: np.ndarray
    B_ref: np.ndarray
    B_L: np.ndarray
    C: np.ndarray
    process_cov: np.ndarray
    measurement_cov: np.ndarray
    sample_period: float = None

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelConfigError("A must be square")
        if self.B_ref.shape[0] != n or self.B_L.shape[0] != n:
            raise ModelConfigError("input matrices must match the state dimension")
        if self.C.shape[1] != n:
            raise ModelConfigError("C must match the state dimension")
        if self.kind == "discrete" and not self.sample_period:
            raise ModelConfigError("discrete StateSpace needs a sample_period")
        R, V = self.process_cov, self.measurement_cov
        if not np.allclose(R, R.T) or not np.allclose(V, V.T):
            raise ModelConfigError("noise covariances must be symmetric")
        if np.linalg.eigvalsh(V).min() <= 0:
            raise ModelConfigError("measurement covariance must be positive definite")
        if np.linalg.eigvalsh(R).min() < -1e-12 * max(1.0, np.linalg.norm(R)):
            raise ModelConfigError("process covariance must be positive semidefinite")


def _cov_matrix(value, dim, default):
    if value is None:
        value = default
    arr = np.asarray(value, float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.shape != (dim, dim):
        raise ModelConfigError(f"covariance must be scalar or {dim}x{dim}")
    return arr


def _complex_step_jac(fun, z0, n_out):
    """Jacobian by complex-step differentiation (exact to machine precision
    for analytic evaluators)."""
    nz = z0.size
    J = np.zeros((n_out, nz))
    h = 1e-30
    for j in range(nz):
        zp = z0.astype(complex)
        zp[j] += 1j * h
        J[:, j] = np.imag(fun(zp)) / h
    return J


def linearize(model, eq, process_cov=None, measurement_cov=None):
    """Continuous small-signal model around eq, algebraic variables
    eliminated through the implicit-function theorem."""
    x0 = eq.state_vector.astype(float)
    y0 = eq.alg_vector.astype(float)
    u_ref0 = eq.command_part.astype(float)
    u_load0 = eq.load_part.astype(float)
    nx, ny = model.n_state, model.n_alg
    nr, nl, nout = model.n_cmd, model.n_load, model.n_out

    xc, yc = x0.astype(complex), y0.astype(complex)
    rc, lc = u_ref0.astype(complex), u_load0.astype(complex)

    fx = _complex_step_jac(lambda z: model.f(z, yc, rc), x0, nx)
    fr = _complex_step_jac(lambda z: model.f(xc, yc, z), u_ref0, nx)
    hx = _complex_step_jac(lambda z: model.outputs(z, yc), x0, nout)

    if ny:
        fy = _complex_step_jac(lambda z: model.f(xc, z, rc), y0, nx)
        gx = _complex_step_jac(lambda z: model.g(z, yc, lc), x0, ny)
        gy = _complex_step_jac(lambda z: model.g(xc, z, lc), y0, ny)
        gl = _complex_step_jac(lambda z: model.g(xc, yc, z), u_load0, ny)
        hy = _complex_step_jac(lambda z: model.outputs(xc, z), y0, nout)
        sv = np.linalg.svd(gy, compute_uv=False)
        if sv.min() <= 1e-12 * sv.max():
            raise LinearizationError(
                "algebraic Jacobian is singular: model not reducible at this "
                "equilibrium (a fixed-voltage bus is needed to break the "
                "angle-shift symmetry)")
        gyi_gx = np.linalg.solve(gy, gx)
        gyi_gl = np.linalg.solve(gy, gl)
        A = fx - fy @ gyi_gx
        B_ref = fr
        B_L = -fy @ gyi_gl
        C = hx - hy @ gyi_gx
        D_L = -hy @ gyi_gl
        if nl and np.abs(D_L).max() > 1e-9:
            raise LinearizationError("output feedthrough from loads is not "
                                     "representable in this state-space form")
    else:
        if nl:
            fl = _complex_step_jac(lambda z: model.f(xc, yc, z), u_load0, nx)
        else:
            fl = np.zeros((nx, 0))
        A, B_ref, B_L, C = fx, fr, fl, hx

    return StateSpace(
        kind="continuous", A=A, B_ref=B_ref, B_L=B_L, C=C,
        process_cov=_cov_matrix(process_cov, nx, 1e-8),
        measurement_cov=_cov_matrix(measurement_cov, nout, 1e-8),
    )


def _expm(M):
    """Matrix exponential by scaling and squaring with a Taylor kernel."""
    nrm = np.linalg.norm(M, 1)
    k = 0
    if nrm > 0.5:
        k = int(math.ceil(math.log2(nrm / 0.5)))
    Ms = M / (2.0 ** k)
    E = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for j in range(1, 40):
        term = term @ Ms / j
        E = E + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(k):
        E = E @ E
    return E


def discretize(ss, Ts, method="zoh"):
    """Discrete model at sample period Ts.

    zoh: A_d = exp(A Ts), B_d = integral of exp(A tau) dtau times B, computed
    jointly via the block-matrix exponential.  tustin: bilinear map.  Process
    noise maps as R_d = R' * Ts, measurement noise is unchanged.
    """
    if ss.kind != "continuous":
        raise ModelConfigError("discretize expects a continuous StateSpace")
    if Ts <= 0:
        raise ModelConfigError("sample period must be positive")
    A = ss.A
    n = A.shape[0]
    B = np.hstack([ss.B_ref, ss.B_L])
    p = B.shape[1]
    if method == "zoh":
        M = np.zeros((n + p, n + p))
        M[:n, :n] = A * Ts
        M[:n, n:] = B * Ts
        E = _expm(M)
        Ad = E[:n, :n]
        Bd = E[:n, n:]
    elif method == "tustin":
        I = np.eye(n)
        W = np.linalg.inv(I - A * (Ts / 2.0))
        Ad = W @ (I + A * (Ts / 2.0))
        Bd = W @ B * Ts
    else:
        raise ModelConfigError(f"unknown discretization method {method!r}")
    nr = ss.B_ref.shape[1]
    return StateSpace(
        kind="discrete", A=Ad, B_ref=Bd[:, :nr], B_L=Bd[:, nr:], C=ss.C.copy(),
        process_cov=ss.process_cov * Ts,
        measurement_cov=ss.measurement_cov.copy(),
        sample_period=Ts,
    )
