"""Per-DGU watermark detector.

Each DGU runs one detector against the rest of the microgrid.  From the
discrete closed-loop plant and the other units' droop laws the detector
builds the open-loop system seen from its own command input: every other
controller is wired in (their accumulator states are appended to the
plant state), while the local command enters as a free input.  Process
noise, the other units' measurement noise, and the other units'
watermarks all act on that interconnection, so its process-noise
covariance is assembled from the exact injection maps rather than
guessed.  The model is then cut down to a minimal realization.

Minimality here is taken with respect to ALL inputs that excite the
state, noise included.  That choice matters: it keeps the model's
steady-state innovation covariance equal to the true one, which is what
drives the honest-case indicator means to zero.  States are removed
only when they are either unreachable from every input and noise source
or invisible from the local measurements.

The detector consumes four synchronized streams: reported measurements,
applied commands (droop output plus watermark), its private watermark
draws, and the load-disturbance input.  A steady-state Kalman filter
tracks the reduced state; one-step residuals of the filtered estimate
are folded into two windowed statistics, a residual autocovariance
check (chi1) and a watermark cross-correlation check (chi2).  Honest
streams drive both toward zero as the window grows; replacing or
distorting the measurement stream breaks the cancellation and at least
one statistic rises to an O(1) value.

All detector arithmetic can be run on rescaled streams (stream_gain):
covariances carry the square of the gain, the Kalman gain is invariant,
and the indicators scale by the square, which lifts tiny per-unit
statistics into a comfortable numeric range for thresholding.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class DetectorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reduced model


@dataclass
class ReducedModel:
    """Minimal open-loop model seen from one DGU's command input.

    Inputs (u_ref of the owning DGU, u_L); outputs that DGU's measured
    deviation pair.  R is the process-noise covariance of the reduced
    state, V the local measurement-noise covariance; both already carry
    stream_gain**2 so that streams premultiplied by stream_gain are
    consistent with them.
    """

    A_m: np.ndarray
    B_refm: np.ndarray
    B_Lm: np.ndarray
    C_m: np.ndarray
    R: np.ndarray
    V: np.ndarray
    dgu_index: int = 1
    stream_gain: float = 1.0
    n_full: int = 0
    removed_states: int = 0
    cb_singular_values: tuple = ()

    def __post_init__(self):
        n = self.A_m.shape[0]
        if self.A_m.shape != (n, n):
            raise ValueError("A_m must be square")
        for name in ("R", "V"):
            m = getattr(self, name)
            if not np.allclose(m, m.T, atol=1e-12 * max(1.0, abs(m).max())):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.V).min() <= 0:
            raise ValueError("V must be positive definite")

    @property
    def n_states(self):
        return self.A_m.shape[0]


def _controllable_basis(A, B, tol):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    K = np.hstack(blocks)
    U, s, _ = np.linalg.svd(K, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return U[:, :0]
    r = int(np.sum(s > tol * s[0]))
    return U[:, :r]


def _observable_basis(A, C, tol):
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    O = np.vstack(blocks)
    _, s, Vt = np.linalg.svd(O, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return Vt[:0].T
    r = int(np.sum(s > tol * s[0]))
    return Vt[:r].T


def _psd_sqrt_factor(R, tol=1e-13):
    """Columns F with F @ F.T = R, dropping numerically null directions."""
    lam, Q = np.linalg.eigh(0.5 * (R + R.T))
    lam = np.clip(lam, 0.0, None)
    top = lam.max() if lam.size else 0.0
    keep = lam > tol * max(top, 1e-300)
    return Q[:, keep] * np.sqrt(lam[keep])


def build_reduced_model(plant, droops, open_dgu, nu_e=0.0,
                        watermark_channels="both", stream_gain=1.0,
                        rank_tol=1e-8):
    """Open-loop model of the microgrid as seen by DGU open_dgu (1-based).

    plant is the discrete closed-loop state space WITHOUT any controller
    wired in (commands are free inputs); droops lists every DGU's gain
    set in plant output order.  Controllers j != open_dgu are
    interconnected here, each contributing its two accumulator states.
    nu_e is the variance of the other units' watermarks, which this
    detector cannot observe and therefore treats as process noise.

    The reduction keeps exactly the subspace reachable from (local
    command, loads, every noise source) and observable from the local
    measurement pair.  Raises DetectorError when C_m @ B_refm loses row
    rank (the watermark must reach the local outputs in one step for the
    cross-correlation statistic to work); warns when more than 90% of
    the states fall away, which usually means a miswired model.
    """
    if plant.kind != "discrete":
        raise ValueError("build_reduced_model needs a discrete-time plant")
    A = plant.A
    Bref = plant.B_ref
    BL = plant.B_L
    C = plant.C
    Ts = plant.sample_period
    n_dgu = C.shape[0] // 2
    if not 1 <= open_dgu <= n_dgu:
        raise ValueError(f"open_dgu must be in 1..{n_dgu}")
    if len(droops) != n_dgu:
        raise ValueError("need one droop gain set per DGU")
    if stream_gain <= 0:
        raise ValueError("stream_gain must be positive")
    mask = {"both": (1.0, 1.0), "active": (1.0, 0.0),
            "reactive": (0.0, 1.0)}[watermark_channels]

    nx = A.shape[0]
    i = open_dgu - 1
    others = [j for j in range(n_dgu) if j != i]
    na = nx + 2 * len(others)

    A_aug = np.zeros((na, na))
    A_aug[:nx, :nx] = A
    R_aug = np.zeros((na, na))
    R_aug[:nx, :nx] = plant.process_cov.copy()

    for m, j in enumerate(others):
        sl = slice(nx + 2 * m, nx + 2 * m + 2)
        Bj = Bref[:, 2 * j:2 * j + 2]
        Cj = C[2 * j:2 * j + 2, :]
        d = droops[j]
        Gj = np.diag([d.alpha_p + Ts * d.beta_p, d.alpha_q + Ts * d.beta_q])
        TsDbj = Ts * np.diag([d.beta_p, d.beta_q])
        # controller j wired in: proportional-plus-sum law on its own outputs
        A_aug[:nx, :nx] += Bj @ Gj @ Cj
        A_aug[:nx, sl] = Bj @ TsDbj
        A_aug[sl, :nx] = Cj
        A_aug[sl, sl] = np.eye(2)
        # measurement noise of unit j enters both the plant (through its
        # controller) and its accumulator
        Vj = plant.measurement_cov[2 * j:2 * j + 2, 2 * j:2 * j + 2]
        BGj = Bj @ Gj
        R_aug[:nx, :nx] += BGj @ Vj @ BGj.T
        R_aug[:nx, sl] += BGj @ Vj
        R_aug[sl, :nx] += Vj @ BGj.T
        R_aug[sl, sl] += Vj
        # unit j's watermark is unobservable here: plain process noise
        Ej = nu_e * np.diag(mask)
        R_aug[:nx, :nx] += Bj @ Ej @ Bj.T

    B_ref_aug = np.vstack([Bref[:, 2 * i:2 * i + 2],
                           np.zeros((na - nx, 2))])
    B_L_aug = np.vstack([BL, np.zeros((na - nx, BL.shape[1]))])
    C_aug = np.hstack([C[2 * i:2 * i + 2, :], np.zeros((2, na - nx))])
    V_i = plant.measurement_cov[2 * i:2 * i + 2, 2 * i:2 * i + 2].copy()

    # minimality w.r.t. every input that excites the state, noise included;
    # dropping a noise-reachable state would bias the innovation covariance
    B_all = np.hstack([B_ref_aug, B_L_aug, _psd_sqrt_factor(R_aug)])
    Vc = _controllable_basis(A_aug, B_all, rank_tol)
    A1 = Vc.T @ A_aug @ Vc
    Wo = _observable_basis(A1, C_aug @ Vc, rank_tol)
    T = Vc @ Wo

    nm = T.shape[1]
    if nm == 0:
        raise DetectorError("model reduction removed every state")
    if nm < 0.1 * na:
        warnings.warn(
            f"model reduction kept only {nm} of {na} states; "
            "check the interconnection wiring", RuntimeWarning)

    g2 = stream_gain * stream_gain
    rm = ReducedModel(
        A_m=T.T @ A_aug @ T,
        B_refm=T.T @ B_ref_aug,
        B_Lm=T.T @ B_L_aug,
        C_m=C_aug @ T,
        R=g2 * (T.T @ R_aug @ T),
        V=g2 * V_i,
        dgu_index=open_dgu,
        stream_gain=float(stream_gain),
        n_full=na,
        removed_states=na - nm,
    )
    sv = np.linalg.svd(rm.C_m @ rm.B_refm, compute_uv=False)
    rm.cb_singular_values = tuple(float(x) for x in sv)
    if sv.min() <= 1e-10 * max(sv.max(), 1e-300):
        raise DetectorError(
            "C_m @ B_refm is row-rank deficient: the command watermark "
            "does not reach this DGU's outputs in one step "
            f"(singular values {sv})")
    return rm


def export_reduced_model(rm, path):
    """Write the reduced-model matrices as a plain-text matrix archive."""
    mats = [("A_m", rm.A_m), ("B_refm", rm.B_refm), ("B_Lm", rm.B_Lm),
            ("C_m", rm.C_m), ("R", rm.R), ("V", rm.V)]
    with open(path, "w") as fh:
        fh.write("gridmark matrix archive v1\n")
        fh.write(f"dgu {rm.dgu_index} stream_gain {rm.stream_gain!r}\n")
        for name, m in mats:
            m = np.atleast_2d(m)
            fh.write(f"# {name} {m.shape[0]} {m.shape[1]}\n")
            for row in m:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


# ---------------------------------------------------------------------------
# Riccati / Kalman


@dataclass
class KalmanState:
    G: np.ndarray
    P: np.ndarray
    W: np.ndarray
    predicted: np.ndarray
    filtered: np.ndarray


def _riccati_rhs(A, C, R, V, P):
    APC = A @ P @ C.T
    S = C @ P @ C.T + V
    X = A @ P @ A.T - APC @ np.linalg.solve(S, APC.T) + R
    return 0.5 * (X + X.T)


def solve_riccati(rm, tol=1e-10, max_iter=100000, method="fixed_point"):
    """Steady prediction covariance P, Kalman gain G, innovation cov W.

    fixed_point iterates the covariance recursion from P0 = R until the
    Frobenius residual of the fixed point is below tol.  doubling is the
    quadratically convergent structured-doubling variant; both finish
    with the same residual check.
    """
    A, C, R, V = rm.A_m, rm.C_m, rm.R, rm.V
    if method == "fixed_point":
        P = R.copy()
        step_tol = 0.02 * tol
        for _ in range(max_iter):
            P_next = _riccati_rhs(A, C, R, V, P)
            delta = np.linalg.norm(P_next - P)
            P = P_next
            if delta <= step_tol:
                break
        else:
            raise DetectorError(
                "Riccati iteration did not converge in "
                f"{max_iter} steps (last step {delta:.3e})")
    elif method == "doubling":
        # doubling recursion on the dual form; H converges to P
        Ak = A.T.copy()
        Gk = C.T @ np.linalg.solve(V, C)
        Hk = R.copy()
        eye = np.eye(A.shape[0])
        for _ in range(200):
            M = np.linalg.solve(eye + Gk @ Hk, np.eye(A.shape[0]))
            A_next = Ak @ M @ Ak
            G_next = Gk + Ak @ M @ Gk @ Ak.T
            H_next = Hk + Ak.T @ Hk @ M @ Ak
            H_next = 0.5 * (H_next + H_next.T)
            delta = np.linalg.norm(H_next - Hk)
            Ak, Gk, Hk = A_next, 0.5 * (G_next + G_next.T), H_next
            if delta <= 0.02 * tol * max(1.0, np.linalg.norm(Hk)):
                break
        else:
            raise DetectorError("doubling iteration did not converge")
        P = Hk
    else:
        raise ValueError(f"unknown Riccati method {method!r}")

    residual = np.linalg.norm(_riccati_rhs(A, C, R, V, P) - P)
    if residual > tol:
        raise DetectorError(
            f"Riccati fixed-point residual {residual:.3e} exceeds {tol:.1e}")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise DetectorError("Riccati solution is not positive definite")
    W = C @ P @ C.T + V
    G = np.linalg.solve(W, C @ P).T
    return P, G, W


def kalman_step(ks, rm, u_ref, u_L, y_reported):
    """One filter update: measurement correction, then time propagation.

    u_ref is the applied command (droop output plus watermark) and
    y_reported the measurement pair the controller saw; both must
    already carry rm.stream_gain.  Mutates ks and returns the
    innovation.
    """
    innovation = y_reported - rm.C_m @ ks.predicted
    ks.filtered = ks.predicted + ks.G @ innovation
    drive = rm.B_refm @ u_ref
    if u_L is not None:
        drive = drive + rm.B_Lm @ u_L
    ks.predicted = rm.A_m @ ks.filtered + drive
    return innovation


# ---------------------------------------------------------------------------
# indicator windows


@dataclass
class Thresholds:
    chi1_star: float
    chi2_star: float


@dataclass
class AlarmDecision:
    alarm: bool
    chi1_fired: bool
    chi2_fired: bool
    chi1: float
    chi2: float


def threshold_test(chi1, chi2, thresholds):
    """Per-window alarm: either statistic at or above its threshold."""
    f1 = bool(chi1 >= thresholds.chi1_star)
    f2 = bool(chi2 >= thresholds.chi2_star)
    return AlarmDecision(alarm=f1 or f2, chi1_fired=f1, chi2_fired=f2,
                         chi1=float(chi1), chi2=float(chi2))


class IndicatorWindow:
    """Sliding window of one-step residuals and their watermark pairing.

    Holds the last T0 residual vectors r and watermark draws e in ring
    buffers together with running sums of r r^T and e r^T.  The sums are
    rebuilt from the rings every T0 pushes so the incremental path stays
    equal to a batch recomputation to high precision.  stride sets the
    emission cadence once the window is full (1 = every step,
    T0 = disjoint windows).
    """

    def __init__(self, T0, n_state, stride=1, thresholds=None):
        if T0 < 2:
            raise ValueError("window length must be at least 2 samples")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.T0 = int(T0)
        self.stride = int(stride)
        self.thresholds = thresholds
        self.n_state = int(n_state)
        self._r = np.zeros((self.T0, self.n_state))
        self._e = np.zeros((self.T0, 2))
        self._S_rr = np.zeros((self.n_state, self.n_state))
        self._S_er = np.zeros((2, self.n_state))
        self._pos = 0
        self.count = 0
        self._pushes = 0

    def push(self, r, e):
        """Insert one (residual, prior watermark) pair.

        Returns True when the window is full and this push lands on the
        emission stride.
        """
        if self.count == self.T0:
            r_old = self._r[self._pos]
            e_old = self._e[self._pos]
            self._S_rr -= np.outer(r_old, r_old)
            self._S_er -= np.outer(e_old, r_old)
        else:
            self.count += 1
        self._r[self._pos] = r
        self._e[self._pos] = e
        self._S_rr += np.outer(r, r)
        self._S_er += np.outer(e, r)
        self._pos = (self._pos + 1) % self.T0
        self._pushes += 1
        if self._pushes % self.T0 == 0:
            self._S_rr = np.einsum("ka,kb->ab", self._r, self._r)
            self._S_er = np.einsum("ka,kb->ab", self._e, self._r)
        if self.count < self.T0:
            return False
        return (self._pushes - self.T0) % self.stride == 0

    def indicators(self, G, W):
        """(M, N, chi1, chi2) for the current window contents."""
        if self.count < self.T0:
            raise DetectorError(
                f"window underfull: {self.count} of {self.T0} samples")
        GWG = G @ W @ G.T
        M = self._S_rr / self.T0 - 0.5 * (GWG + GWG.T)
        N = self._S_er / self.T0
        chi1 = abs(float(np.trace(M)))
        chi2 = float(np.abs(N).sum())
        return M, N, chi1, chi2


def accumulate_indicators(win, rm, ks, filtered, commands, watermarks,
                          u_loads=None):
    """Batch indicator computation over one full window.

    filtered holds T0+1 consecutive filtered estimates (the first is the
    estimate one step before the window).  commands, watermarks and
    u_loads hold the T0 inputs applied across those transitions, already
    scaled by rm.stream_gain like everything else.  Fills win's
    accumulators and returns (M, N, chi1, chi2).
    """
    filtered = np.asarray(filtered, dtype=float)
    T0 = win.T0
    if len(filtered) != T0 + 1:
        raise DetectorError(
            f"window underfull: need {T0 + 1} filtered estimates, "
            f"got {len(filtered)}")
    commands = np.asarray(commands, dtype=float)
    watermarks = np.asarray(watermarks, dtype=float)
    if len(commands) != T0 or len(watermarks) != T0:
        raise DetectorError("need exactly T0 commands and watermark draws")
    applied = commands + watermarks
    pred = filtered[:-1] @ rm.A_m.T + applied @ rm.B_refm.T
    if u_loads is not None:
        pred = pred + np.asarray(u_loads, dtype=float) @ rm.B_Lm.T
    residuals = filtered[1:] - pred
    for r, e in zip(residuals, watermarks):
        win.push(r, e)
    return win.indicators(ks.G, ks.W)


def calibrate_thresholds(honest_runs, quantile=0.999, safety_factor=1.5):
    """Thresholds from attack-free Monte-Carlo windows.

    honest_runs is a sequence of per-run (chi1_windows, chi2_windows)
    array pairs; at least 20 runs, and together enough windows to place
    the requested quantile on an actual order statistic.  chi* is
    safety_factor times the empirical quantile of the pooled windows.
    """
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie strictly between 0 and 1")
    runs = [(np.asarray(c1, dtype=float), np.asarray(c2, dtype=float))
            for c1, c2 in honest_runs]
    if len(runs) < 20:
        raise DetectorError(
            f"calibration needs at least 20 attack-free runs, got {len(runs)}")
    chi1 = np.concatenate([c1 for c1, _ in runs])
    chi2 = np.concatenate([c2 for _, c2 in runs])
    need = math.ceil(1.0 / (1.0 - quantile))
    if chi1.size < need:
        per_run = max(1, chi1.size // len(runs))
        min_runs = math.ceil(need / per_run)
        raise DetectorError(
            f"{chi1.size} honest windows cannot support quantile "
            f"{quantile}: need at least {need} windows, about "
            f"{min_runs} runs of this length")
    q1 = float(np.quantile(chi1, quantile, method="higher"))
    q2 = float(np.quantile(chi2, quantile, method="higher"))
    return Thresholds(chi1_star=safety_factor * q1,
                      chi2_star=safety_factor * q2)


# ---------------------------------------------------------------------------
# runtime detector


@dataclass
class WindowRecord:
    time: float
    chi1: float
    chi2: float
    alarm: bool
    chi1_fired: bool
    chi2_fired: bool
    confirmed: bool


class Detector:
    """Streaming detector for one DGU.

    Feed it the loop's synchronized per-step streams via step(); it runs
    the Kalman filter, maintains the indicator window, and emits one
    WindowRecord per stride once the window fills.  An attack is
    confirmed after confirm_consecutive consecutive alarming windows.
    Instances are independent per DGU and strictly sequential inside.
    """

    def __init__(self, rm, window_samples, stride=1, thresholds=None,
                 confirm_consecutive=2, riccati_method="fixed_point"):
        self.rm = rm
        P, G, W = solve_riccati(rm, method=riccati_method)
        n = rm.n_states
        self.ks = KalmanState(G=G, P=P, W=W,
                              predicted=np.zeros(n), filtered=np.zeros(n))
        self.window = IndicatorWindow(window_samples, n, stride=stride,
                                      thresholds=thresholds)
        self.confirm_consecutive = int(confirm_consecutive)
        self.records = []
        self.first_confirmed_time = None
        self._consecutive = 0
        self._k = 0
        self._prev_filtered = None
        self._prev_applied = None
        self._prev_e = None
        self._prev_uL = None

    def step(self, t, z, command, watermark, u_load=None):
        """Advance one sample; returns a WindowRecord on emission steps.

        z is the reported measurement pair the controller consumed,
        command the droop output before the watermark, watermark that
        step's private draw, u_load the load-disturbance input.  All in
        plant units; scaling is applied here.
        """
        g = self.rm.stream_gain
        z = g * np.asarray(z, dtype=float)
        command = np.asarray(command, dtype=float)
        watermark = np.asarray(watermark, dtype=float)
        applied = g * (command + watermark)
        e_s = g * watermark
        uL = None if u_load is None else g * np.asarray(u_load, dtype=float)

        innovation = z - self.rm.C_m @ self.ks.predicted
        self.ks.filtered = self.ks.predicted + self.ks.G @ innovation

        record = None
        if self._k >= 1:
            r = self.ks.filtered - self.rm.A_m @ self._prev_filtered \
                - self.rm.B_refm @ self._prev_applied
            if self._prev_uL is not None:
                r = r - self.rm.B_Lm @ self._prev_uL
            due = self.window.push(r, self._prev_e)
            if due:
                _, _, chi1, chi2 = self.window.indicators(self.ks.G, self.ks.W)
                if self.thresholds is not None:
                    decision = threshold_test(chi1, chi2, self.thresholds)
                    alarm = decision.alarm
                    f1, f2 = decision.chi1_fired, decision.chi2_fired
                else:
                    alarm = f1 = f2 = False
                self._consecutive = self._consecutive + 1 if alarm else 0
                confirmed = self._consecutive >= self.confirm_consecutive
                record = WindowRecord(time=t, chi1=chi1, chi2=chi2,
                                      alarm=alarm, chi1_fired=f1,
                                      chi2_fired=f2, confirmed=confirmed)
                self.records.append(record)
                if confirmed and self.first_confirmed_time is None:
                    self.first_confirmed_time = t

        drive = self.rm.B_refm @ applied
        if uL is not None:
            drive = drive + self.rm.B_Lm @ uL
        self.ks.predicted = self.rm.A_m @ self.ks.filtered + drive

        self._prev_filtered = self.ks.filtered
        self._prev_applied = applied
        self._prev_e = e_s
        self._prev_uL = uL
        self._k += 1
        return record

    @property
    def thresholds(self):
        return self.window.thresholds
