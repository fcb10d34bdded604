"""Closed-loop simulation of the watermarked, droop-controlled microgrid.

Runs the discrete linearized plant in feedback with the droop
controllers, watermark sources, attack channels, and one detector per
DGU, producing synchronized per-step streams.  Everything operates on
deviations from the equilibrium; the nonlinear model is used only to
find that equilibrium and linearize around it.

Per step the order is: plant state advances with process noise, sensors
report outputs with measurement noise, attack channels rewrite the
reported stream, droop controllers act on what was reported and add
their watermarks, and the detectors consume the same streams the
controllers saw.  All randomness comes from four named seed streams
(process, measurement, watermark, attack), so a scenario reruns
bit-identically.

Scenario files are YAML with a versioned schema; see load_scenario.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .grid_model import (assemble_dae, discretize, find_equilibrium,
                         linearize, load_network)
from .droop_control import DroopState, WatermarkSource, droop_step, \
    gain_matrices
from .attack_channel import AttackChannel, AttackSpec, AttackSpecError
from .watermark_detector import (Detector, Thresholds, build_reduced_model,
                                 export_reduced_model)


class ScenarioError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


class SimulationDivergedError(RuntimeError):
    """State left the guard region in a scenario with no active attack."""

    def __init__(self, message, timeseries=None, step=None, time=None):
        super().__init__(message)
        self.timeseries = timeseries
        self.step = step
        self.time = time


_SCN_VERSION = 1
_SEED_NAMES = ("process", "measurement", "watermark", "attack")
# fixed tags mixed into derived per-run seed streams
_SEED_TAGS = {"process": 1, "measurement": 2, "watermark": 3, "attack": 4}


@dataclass
class DetectorConfig:
    window_seconds: float = 2.0
    stride: int = 1
    confirm_consecutive: int = 2
    stream_gain: float = 1.0
    thresholds: Thresholds = None
    thresholds_source: str = ""


@dataclass
class Scenario:
    name: str
    model_path: str
    steps: int
    sample_period: float
    process_variance: float
    measurement_variance: float
    watermark_variance: float
    watermark_channels: str
    seeds: dict
    attacks: list
    divergence_guard: float = 1000.0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    loads_schedule: list = field(default_factory=list)
    source_path: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ScenarioError("steps must be at least 1")
        if self.sample_period <= 0:
            raise ScenarioError("sample_period must be positive")
        for name in ("process_variance", "measurement_variance",
                     "watermark_variance"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be nonnegative")
        missing = [k for k in _SEED_NAMES if k not in self.seeds]
        if missing:
            raise ScenarioError(f"missing seeds: {', '.join(missing)}")
        self.seeds = {k: int(self.seeds[k]) for k in _SEED_NAMES}
        if self.divergence_guard <= 0:
            raise ScenarioError("divergence_guard must be positive")
        if self.watermark_channels not in ("both", "active", "reactive"):
            raise ScenarioError(
                f"unknown watermark channels {self.watermark_channels!r}")

    @property
    def duration(self):
        return self.steps * self.sample_period


def _package_data_dir():
    return Path(__file__).resolve().parent / "data"


def _resolve_path(name, base_dir):
    p = Path(name)
    if p.is_absolute():
        if p.exists():
            return str(p)
        raise ScenarioError(f"referenced file not found: {p}")
    for root in (Path(base_dir), _package_data_dir()):
        cand = root / p
        if cand.exists():
            return str(cand.resolve())
    raise ScenarioError(
        f"referenced file {name!r} not found beside the scenario "
        f"({base_dir}) or in the bundled data directory")


def load_thresholds(path):
    """Read a calibration output file -> Thresholds."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return Thresholds(chi1_star=float(raw["chi1_star"]),
                          chi2_star=float(raw["chi2_star"]))
    except (TypeError, KeyError) as exc:
        raise ScenarioError(f"{path}: not a thresholds file ({exc})")


def save_thresholds(path, thresholds, metadata=None):
    doc = {"chi1_star": float(thresholds.chi1_star),
           "chi2_star": float(thresholds.chi2_star)}
    if metadata:
        doc.update(metadata)
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def load_scenario(path):
    """Parse and validate a .scn scenario file.

    The schema (scn_version 1) carries: name, model (network file,
    resolved beside the scenario or in the bundled data), steps or
    duration (must be a whole number of sample periods), sample_period,
    noise {process_variance, measurement_variance}, watermark {variance,
    channels}, seeds {process, measurement, watermark, attack}, optional
    divergence_guard, detector {window_seconds, stride,
    confirm_consecutive, stream_gain, thresholds (inline pair or file)},
    attacks (list of attack specs), loads_schedule (list of step
    changes in load power).
    """
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: not a scenario file")
    ver = raw.get("scn_version")
    if ver != _SCN_VERSION:
        raise ScenarioError(
            f"{path}: scn_version {ver!r} unsupported (expected "
            f"{_SCN_VERSION})")
    base_dir = path.parent.resolve()

    def need(key):
        if key not in raw:
            raise ScenarioError(f"{path}: missing required key {key!r}")
        return raw[key]

    Ts = float(need("sample_period"))
    if Ts <= 0:
        raise ScenarioError(f"{path}: sample_period must be positive")
    if "steps" in raw:
        steps = int(raw["steps"])
    elif "duration" in raw:
        dur = float(raw["duration"])
        steps_f = dur / Ts
        steps = round(steps_f)
        if abs(steps_f - steps) > 1e-9 * max(1.0, abs(steps_f)):
            lo, hi = math.floor(steps_f) * Ts, math.ceil(steps_f) * Ts
            raise ScenarioError(
                f"{path}: duration {dur} is not a whole number of sample "
                f"periods ({steps_f:.6f} steps); nearest whole durations "
                f"are {lo:.6f} or {hi:.6f}, or give steps directly")
    else:
        raise ScenarioError(f"{path}: needs steps or duration")

    noise = need("noise")
    wm = need("watermark")
    seeds = need("seeds")

    det_raw = raw.get("detector", {}) or {}
    thresholds = None
    th_source = ""
    th_ref = det_raw.get("thresholds")
    if isinstance(th_ref, str):
        th_path = _resolve_path(th_ref, base_dir)
        thresholds = load_thresholds(th_path)
        th_source = th_path
    elif isinstance(th_ref, dict):
        thresholds = Thresholds(chi1_star=float(th_ref["chi1_star"]),
                                chi2_star=float(th_ref["chi2_star"]))
        th_source = "inline"
    elif th_ref is not None:
        raise ScenarioError(
            f"{path}: detector.thresholds must be a mapping or a file name")
    det = DetectorConfig(
        window_seconds=float(det_raw.get("window_seconds", 2.0)),
        stride=int(det_raw.get("stride", 1)),
        confirm_consecutive=int(det_raw.get("confirm_consecutive", 2)),
        stream_gain=float(det_raw.get("stream_gain", 1.0)),
        thresholds=thresholds,
        thresholds_source=th_source,
    )

    attacks = []
    for idx, a in enumerate(raw.get("attacks", []) or []):
        try:
            attacks.append(AttackSpec(
                target_dgu=int(a["target_dgu"]),
                target_signal=str(a.get("target_signal", "both")),
                start_time=float(a["start_time"]),
                end_time=float(a["end_time"]),
                template=dict(a["template"]),
            ))
        except (KeyError, AttackSpecError) as exc:
            raise ScenarioError(f"{path}: attack {idx + 1}: {exc}")

    schedule = []
    for idx, s in enumerate(raw.get("loads_schedule", []) or []):
        try:
            entry = {"time": float(s["time"]), "load": int(s["load"]),
                     "delta_p_w": float(s.get("delta_p_w", 0.0)),
                     "delta_q_var": float(s.get("delta_q_var", 0.0))}
        except KeyError as exc:
            raise ScenarioError(
                f"{path}: loads_schedule entry {idx + 1}: missing {exc}")
        if entry["time"] < 0 or entry["load"] < 1:
            raise ScenarioError(
                f"{path}: loads_schedule entry {idx + 1}: bad time or load")
        schedule.append(entry)

    try:
        return Scenario(
            name=str(raw.get("name", path.stem)),
            model_path=_resolve_path(str(need("model")), base_dir),
            steps=steps,
            sample_period=Ts,
            process_variance=float(noise.get("process_variance", 0.0)),
            measurement_variance=float(noise.get("measurement_variance", 0.0)),
            watermark_variance=float(wm.get("variance", 0.0)),
            watermark_channels=str(wm.get("channels", "both")),
            seeds=dict(seeds),
            attacks=attacks,
            divergence_guard=float(raw.get("divergence_guard", 1000.0)),
            detector=det,
            loads_schedule=schedule,
            source_path=str(path.resolve()),
        )
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}")


# ---------------------------------------------------------------------------
# plant preparation


@dataclass
class PreparedPlant:
    network: object
    dgus: list
    loads: list
    equilibrium: object
    continuous: object
    plant: object
    Da: np.ndarray
    Db: np.ndarray
    reduced: list
    # physics fingerprint of the scenario this plant was built from
    noise_key: tuple = None

    @property
    def n_dgu(self):
        return len(self.dgus)


def prepare_plant(sc):
    """Model pipeline for a scenario: equilibrium, discretization, and
    the per-DGU reduced detector models.  Reusable across runs of the
    same scenario (it is deterministic)."""
    net, dgus, loads = load_network(sc.model_path)
    dae = assemble_dae(net, dgus, loads)
    eq = find_equilibrium(dae)
    cont = linearize(dae, eq, process_cov=sc.process_variance,
                     measurement_cov=sc.measurement_variance)
    plant = discretize(cont, sc.sample_period)
    Da, Db = gain_matrices(dgus)
    reduced = []
    if sc.measurement_variance > 0:
        for j in range(len(dgus)):
            reduced.append(build_reduced_model(
                plant, dgus, j + 1, nu_e=sc.watermark_variance,
                watermark_channels=sc.watermark_channels,
                stream_gain=sc.detector.stream_gain))
    key = (sc.model_path, sc.sample_period, sc.process_variance,
           sc.measurement_variance, sc.watermark_variance,
           sc.watermark_channels)
    return PreparedPlant(network=net, dgus=dgus, loads=loads, equilibrium=eq,
                         continuous=cont, plant=plant, Da=Da, Db=Db,
                         reduced=reduced, noise_key=key)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class TimeSeries:
    scenario: Scenario
    t: np.ndarray
    y_true: np.ndarray
    z: np.ndarray
    cmd_pre: np.ndarray
    cmd_post: np.ndarray
    watermark: np.ndarray
    est_out: np.ndarray
    windows: list
    first_confirmed: list
    steps_completed: int
    diverged: bool = False
    diverged_step: int = None
    attack_was_active: bool = False
    filtered: list = None
    detectors: list = None

    @property
    def diverged_time(self):
        if self.diverged_step is None:
            return None
        return self.diverged_step * self.scenario.sample_period


def _load_deviation_table(sc, loads, power_base):
    """Per-step load deviation input (steps x 2m), or None when empty."""
    if not sc.loads_schedule:
        return None
    m = len(loads)
    table = np.zeros((sc.steps, 2 * m))
    for entry in sc.loads_schedule:
        if entry["load"] > m:
            raise ScenarioError(
                f"loads_schedule names load {entry['load']} but the model "
                f"has {m}")
        k0 = int(round(entry["time"] / sc.sample_period))
        if k0 >= sc.steps:
            continue
        j = entry["load"] - 1
        table[k0:, 2 * j] += entry["delta_p_w"] / power_base
        table[k0:, 2 * j + 1] += entry["delta_q_var"] / power_base
    return table


def run_scenario(sc, prepared=None, record_filtered=False):
    """Simulate one scenario -> TimeSeries.

    Detectors run whenever the scenario has measurement noise (their
    noise model must be nondegenerate); a zero-noise scenario still
    simulates the loop but records no detector windows.  If the state
    leaves the divergence guard while some attack has already been
    active the truncated run is returned as an outcome; if it happens
    with no attack having started, SimulationDivergedError is raised.

    record_filtered additionally stores every detector's filtered state
    history (memory-heavy; used for long-window statistics).
    """
    pp = prepared if prepared is not None else prepare_plant(sc)
    if pp.noise_key is not None:
        key = (sc.model_path, sc.sample_period, sc.process_variance,
               sc.measurement_variance, sc.watermark_variance,
               sc.watermark_channels)
        if key != pp.noise_key:
            raise ScenarioError(
                "prepared plant was built for a different model or noise "
                f"design ({pp.noise_key} vs {key}); call prepare_plant on "
                "this scenario")
    plant = pp.plant
    nd = pp.n_dgu
    n = sc.steps
    Ts = sc.sample_period
    Ad, Bd, BL, C = plant.A, plant.B_ref, plant.B_L, plant.C
    nx = Ad.shape[0]

    rng_p = np.random.default_rng(sc.seeds["process"])
    rng_m = np.random.default_rng(sc.seeds["measurement"])
    wm_seeds = np.random.SeedSequence(sc.seeds["watermark"]).spawn(nd)
    wms = [WatermarkSource(sc.watermark_variance, s, sc.watermark_channels)
           for s in wm_seeds]
    atk_seeds = np.random.SeedSequence(sc.seeds["attack"]).spawn(
        max(1, len(sc.attacks)))
    channels = [AttackChannel(spec, Ts, nd, np.random.default_rng(s))
                for spec, s in zip(sc.attacks, atk_seeds)]

    # all plant noise is drawn up front from the named streams
    Lw = np.linalg.cholesky(plant.process_cov) \
        if sc.process_variance > 0 else None
    w = rng_p.standard_normal((n, nx)) @ Lw.T if Lw is not None \
        else np.zeros((n, nx))
    Lv = np.linalg.cholesky(plant.measurement_cov) \
        if sc.measurement_variance > 0 else None
    v = rng_m.standard_normal((n, 2 * nd)) @ Lv.T if Lv is not None \
        else np.zeros((n, 2 * nd))

    droops = [DroopState(d.alpha_p, d.beta_p, d.alpha_q, d.beta_q, Ts)
              for d in pp.dgus]
    detectors = []
    if pp.reduced:
        window_samples = int(sc.detector.window_seconds / Ts + 1e-9)
        gain = sc.detector.stream_gain
        models = []
        for rm in pp.reduced:
            if rm.stream_gain != gain:
                # a reduced model carries R, V scaled by its own gain^2;
                # retarget in place of a full rebuild
                s = (gain / rm.stream_gain) ** 2
                rm = replace(rm, R=rm.R * s, V=rm.V * s, stream_gain=gain)
            models.append(rm)
        detectors = [Detector(rm, window_samples,
                              stride=sc.detector.stride,
                              thresholds=sc.detector.thresholds,
                              confirm_consecutive=sc.detector.confirm_consecutive)
                     for rm in models]

    uL = _load_deviation_table(sc, pp.loads, pp.network.power_base)

    t = np.arange(n) * Ts
    y_true = np.zeros((n, 2 * nd))
    z_rep = np.zeros((n, 2 * nd))
    cmd_pre = np.zeros((n, 2 * nd))
    cmd_post = np.zeros((n, 2 * nd))
    wm_log = np.zeros((n, 2 * nd))
    est_out = np.zeros((n, 2 * nd))
    filtered = [[] for _ in detectors] if record_filtered else None

    x = w[0].copy()
    attack_was_active = False
    diverged = False
    diverged_step = None
    completed = n

    for k in range(n):
        tk = t[k]
        y = C @ x + v[k]
        y_true[k] = y
        zk = y
        if channels:
            zk = y.copy()
            for ch in channels:
                zk = ch.apply(tk, k, zk)
                if ch.active(tk):
                    attack_was_active = True
        z_rep[k] = zk

        for j in range(nd):
            dp, dq = droop_step(droops[j], zk[2 * j], zk[2 * j + 1])
            e = wms[j].draw()
            cmd_pre[k, 2 * j] = dp
            cmd_pre[k, 2 * j + 1] = dq
            cmd_post[k, 2 * j] = dp + e[0]
            cmd_post[k, 2 * j + 1] = dq + e[1]
            wm_log[k, 2 * j] = e[0]
            wm_log[k, 2 * j + 1] = e[1]

        uL_k = uL[k] if uL is not None else None
        for j, det in enumerate(detectors):
            det.step(tk, zk[2 * j:2 * j + 2], cmd_pre[k, 2 * j:2 * j + 2],
                     wm_log[k, 2 * j:2 * j + 2], uL_k)
            est_out[k, 2 * j:2 * j + 2] = \
                (det.rm.C_m @ det.ks.filtered) / det.rm.stream_gain
            if record_filtered:
                filtered[j].append(det.ks.filtered.copy())

        if k + 1 < n:
            x = Ad @ x + Bd @ cmd_post[k] + w[k + 1]
            if uL_k is not None:
                x = x + BL @ uL_k
            if not np.isfinite(x).all() or \
                    np.abs(x).max() > sc.divergence_guard:
                diverged = True
                diverged_step = k + 1
                completed = k + 1
                break

    ts = TimeSeries(
        scenario=sc,
        t=t[:completed],
        y_true=y_true[:completed],
        z=z_rep[:completed],
        cmd_pre=cmd_pre[:completed],
        cmd_post=cmd_post[:completed],
        watermark=wm_log[:completed],
        est_out=est_out[:completed],
        windows=[list(det.records) for det in detectors],
        first_confirmed=[det.first_confirmed_time for det in detectors],
        steps_completed=completed,
        diverged=diverged,
        diverged_step=diverged_step,
        attack_was_active=attack_was_active,
        filtered=[np.array(f) for f in filtered] if record_filtered else None,
        detectors=detectors,
    )
    if diverged and not attack_was_active:
        raise SimulationDivergedError(
            f"state left the divergence guard ({sc.divergence_guard}) at "
            f"t = {ts.diverged_time:.4f} s with no attack active "
            f"(last finite step {completed - 1})",
            timeseries=ts, step=diverged_step, time=ts.diverged_time)
    return ts


# ---------------------------------------------------------------------------
# summaries and Monte Carlo


@dataclass
class RunSummary:
    run_index: int
    name: str
    seeds: dict
    steps_completed: int
    diverged: bool
    diverged_time: float
    window_count: int
    alarm_count: int
    window_alarm_rate: float
    max_chi1: list
    max_chi2: list
    chi1_windows: np.ndarray
    chi2_windows: np.ndarray
    first_alarm_time: float
    first_confirmed_time: float
    detection_latency: float
    timeseries: TimeSeries = None


def summarize_run(ts, run_index=0):
    sc = ts.scenario
    chi1 = [np.array([w.chi1 for w in recs]) for recs in ts.windows]
    chi2 = [np.array([w.chi2 for w in recs]) for recs in ts.windows]
    alarms = [w for recs in ts.windows for w in recs if w.alarm]
    n_windows = sum(len(recs) for recs in ts.windows)
    confirmed = [t for t in ts.first_confirmed if t is not None]
    first_confirmed = min(confirmed) if confirmed else None
    first_alarm = min((w.time for w in alarms), default=None)
    latency = None
    if first_confirmed is not None and sc.attacks:
        t0 = min(a.start_time for a in sc.attacks)
        latency = first_confirmed - t0
    return RunSummary(
        run_index=run_index,
        name=sc.name,
        seeds=dict(sc.seeds),
        steps_completed=ts.steps_completed,
        diverged=ts.diverged,
        diverged_time=ts.diverged_time,
        window_count=n_windows,
        alarm_count=len(alarms),
        window_alarm_rate=len(alarms) / n_windows if n_windows else 0.0,
        max_chi1=[float(c.max()) if c.size else 0.0 for c in chi1],
        max_chi2=[float(c.max()) if c.size else 0.0 for c in chi2],
        chi1_windows=np.concatenate(chi1) if chi1 else np.zeros(0),
        chi2_windows=np.concatenate(chi2) if chi2 else np.zeros(0),
        first_alarm_time=first_alarm,
        first_confirmed_time=first_confirmed,
        detection_latency=latency,
    )


def derive_seeds(seed_base, run_index):
    """Independent, reproducible seed set for one Monte-Carlo run."""
    return {name: int(np.random.SeedSequence(
        [int(seed_base) + int(run_index), tag]).generate_state(1)[0])
        for name, tag in _SEED_TAGS.items()}


def monte_carlo(sc, n_runs, seed_base, prepared=None, keep_timeseries=False,
                record_filtered=False):
    """Seeded batch of independent runs -> list of RunSummary.

    Run i uses seeds derived from seed_base + i for all four streams.
    Divergence inside an attacked scenario is captured in the summary;
    any other per-run failure is re-raised with the run index attached.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    pp = prepared if prepared is not None else prepare_plant(sc)
    summaries = []
    for i in range(n_runs):
        sc_i = replace(sc, seeds=derive_seeds(seed_base, i))
        try:
            ts = run_scenario(sc_i, prepared=pp,
                              record_filtered=record_filtered)
        except SimulationDivergedError as exc:
            raise SimulationDivergedError(
                f"run {i} (seed base {seed_base}): {exc}",
                timeseries=exc.timeseries, step=exc.step,
                time=exc.time) from exc
        except Exception as exc:
            raise RuntimeError(f"run {i} (seed base {seed_base}): {exc}") \
                from exc
        summary = summarize_run(ts, run_index=i)
        if keep_timeseries:
            summary.timeseries = ts
        summaries.append(summary)
    return summaries


# ---------------------------------------------------------------------------
# artifacts


_TS_SCHEMA = "gridmark-timeseries v1"
_IND_SCHEMA = "gridmark-indicators v1"


def _fmt(x):
    return repr(float(x))


def _write_timeseries_csv(path, ts):
    nd = ts.y_true.shape[1] // 2
    cols = ["t"]
    groups = [("freq_true", "volt_true", ts.y_true),
              ("freq_rep", "volt_rep", ts.z),
              ("cmd_p_pre", "cmd_q_pre", ts.cmd_pre),
              ("cmd_p_post", "cmd_q_post", ts.cmd_post),
              ("wm_p", "wm_q", ts.watermark),
              ("est_freq", "est_volt", ts.est_out)]
    for fname, vname, _ in groups:
        for j in range(1, nd + 1):
            cols += [f"{fname}_{j}", f"{vname}_{j}"]
    with open(path, "w") as fh:
        fh.write(f"# schema: {_TS_SCHEMA}\n")
        fh.write(",".join(cols) + "\n")
        for k in range(ts.steps_completed):
            row = [_fmt(ts.t[k])]
            for _, _, arr in groups:
                row += [_fmt(x) for x in arr[k]]
            fh.write(",".join(row) + "\n")


def _write_indicators_csv(path, ts):
    with open(path, "w") as fh:
        fh.write(f"# schema: {_IND_SCHEMA}\n")
        fh.write("dgu,window_end_time,chi1,chi2,alarm,chi1_fired,"
                 "chi2_fired,confirmed\n")
        for j, recs in enumerate(ts.windows, start=1):
            for wrec in recs:
                fh.write(",".join([
                    str(j), _fmt(wrec.time), _fmt(wrec.chi1),
                    _fmt(wrec.chi2), str(int(wrec.alarm)),
                    str(int(wrec.chi1_fired)), str(int(wrec.chi2_fired)),
                    str(int(wrec.confirmed))]) + "\n")


def summary_dict(ts):
    """JSON-ready run summary (deterministic: no timestamps, sorted keys)."""
    sc = ts.scenario
    s = summarize_run(ts)
    per_dgu = []
    for j, recs in enumerate(ts.windows, start=1):
        per_dgu.append({
            "dgu": j,
            "windows": len(recs),
            "alarms": sum(1 for w in recs if w.alarm),
            "max_chi1": s.max_chi1[j - 1] if s.max_chi1 else 0.0,
            "max_chi2": s.max_chi2[j - 1] if s.max_chi2 else 0.0,
            "first_alarm_time": min((w.time for w in recs if w.alarm),
                                    default=None),
            "first_confirmed_time": ts.first_confirmed[j - 1],
        })
    return {
        "scenario": sc.name,
        "steps": sc.steps,
        "steps_completed": ts.steps_completed,
        "sample_period": sc.sample_period,
        "diverged": ts.diverged,
        "diverged_time": ts.diverged_time,
        "attack_was_active": ts.attack_was_active,
        "attacks": [{"target_dgu": a.target_dgu,
                     "target_signal": a.target_signal,
                     "start_time": a.start_time,
                     "end_time": a.end_time,
                     "kind": a.template["kind"]} for a in sc.attacks],
        "seeds": dict(sc.seeds),
        "stream_gain": sc.detector.stream_gain,
        "thresholds": None if sc.detector.thresholds is None else
            {"chi1_star": sc.detector.thresholds.chi1_star,
             "chi2_star": sc.detector.thresholds.chi2_star},
        "window_count": s.window_count,
        "alarm_count": s.alarm_count,
        "window_alarm_rate": s.window_alarm_rate,
        "first_alarm_time": s.first_alarm_time,
        "first_confirmed_time": s.first_confirmed_time,
        "detection_latency": s.detection_latency,
        "per_dgu": per_dgu,
    }


def _scenario_sha256(sc):
    if sc.source_path and Path(sc.source_path).exists():
        return hashlib.sha256(Path(sc.source_path).read_bytes()).hexdigest()
    doc = {k: v for k, v in sc.__dict__.items()
           if k not in ("attacks", "detector")}
    doc["attacks"] = [a.__dict__ for a in sc.attacks]
    det = dict(sc.detector.__dict__)
    th = det.pop("thresholds")
    det["thresholds"] = None if th is None else [th.chi1_star, th.chi2_star]
    doc["detector"] = det
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def write_run_artifacts(ts, out_dir, force=False, write_models=True):
    """Write timeseries.csv, indicators.csv, summary.json, manifest.json
    (and the audit copies of the reduced models) under out_dir.

    Refuses to overwrite an existing manifest unless force is set.
    """
    from . import __version__
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise ArtifactError(
            f"{manifest_path} already exists; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    _write_timeseries_csv(out / "timeseries.csv", ts)
    _write_indicators_csv(out / "indicators.csv", ts)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary_dict(ts), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if write_models and ts.detectors:
        mdir = out / "models"
        mdir.mkdir(exist_ok=True)
        for det in ts.detectors:
            export_reduced_model(
                det.rm, mdir / f"dgu{det.rm.dgu_index}_model.txt")
    scen_sha = _scenario_sha256(ts.scenario)
    trace = {"scenario_sha256": scen_sha,
             "seeds": dict(ts.scenario.seeds),
             "tool_version": __version__}
    manifest = {
        "tool": "gridmark",
        "tool_version": __version__,
        "scenario_name": ts.scenario.name,
        "scenario_file": Path(ts.scenario.source_path).name
            if ts.scenario.source_path else "",
        "scenario_sha256": scen_sha,
        "seeds": dict(ts.scenario.seeds),
        "schemas": {"timeseries.csv": _TS_SCHEMA,
                    "indicators.csv": _IND_SCHEMA},
        "artifact_hash": hashlib.sha256(
            json.dumps(trace, sort_keys=True).encode()).hexdigest(),
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
