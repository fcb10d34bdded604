"""Sensor-stream attack templates and their runtime state.

Attacks corrupt the reported measurement vector (the stacked
(freq, volt) deviations for all DGUs) between the sensors and the
controllers.  Four templates:

  passthrough      report the actual signal unchanged (control case)
  noise_injection  add i.i.d. Gaussian noise of a chosen variance
  replay           record a window of honest samples, then loop it
  destab_filter    pass the signal through a rational discrete filter
                   and add an i.i.d. dither on top

Every template touches only the targeted components inside the attack
window; all other components and all other times are returned
bit-identically.  Templates never see controller internals or watermark
draws, only the reported measurement stream.
"""

from dataclasses import dataclass, field

import numpy as np


class AttackSpecError(ValueError):
    pass


_KINDS = ("passthrough", "noise_injection", "replay", "destab_filter")


@dataclass
class AttackSpec:
    """Validated description of one attack.

    target_dgu is the 1-based position in the scenario's DGU list;
    target_signal is "frequency", "voltage" or "both".  template is a
    dict with a "kind" key and kind-specific parameters.  Filter
    coefficient lists are in ascending powers of z, and the denominator
    must be monic (last entry 1.0).
    """

    target_dgu: int
    target_signal: str
    start_time: float
    end_time: float
    template: dict

    def __post_init__(self):
        if self.target_dgu < 1:
            raise AttackSpecError("target_dgu is a 1-based DGU position")
        if self.target_signal not in ("frequency", "voltage", "both"):
            raise AttackSpecError(
                f"unknown target_signal {self.target_signal!r}")
        if not self.start_time < self.end_time:
            raise AttackSpecError("attack window must satisfy start < end")
        kind = self.template.get("kind")
        if kind not in _KINDS:
            raise AttackSpecError(f"unknown attack template kind {kind!r}")
        if kind == "noise_injection":
            var = self.template.get("variance")
            if var is None or var < 0:
                raise AttackSpecError(
                    "noise_injection needs a nonnegative variance")
        elif kind == "replay":
            rec = self.template.get("record_seconds")
            if rec is None or rec <= 0:
                raise AttackSpecError("replay needs record_seconds > 0")
            if self.start_time - rec < 0:
                raise AttackSpecError(
                    "replay would start before its recording window is full")
        elif kind == "destab_filter":
            num = self.template.get("numerator")
            den = self.template.get("denominator")
            if not num or not den:
                raise AttackSpecError(
                    "destab_filter needs numerator and denominator lists")
            if den[-1] != 1.0:
                raise AttackSpecError(
                    "denominator must be monic in ascending powers "
                    "(last coefficient 1.0)")
            if len(num) > len(den):
                raise AttackSpecError(
                    "filter must be proper: deg(num) <= deg(den)")
            mu = self.template.get("mu_variance", 0.0)
            if mu < 0:
                raise AttackSpecError("mu_variance must be nonnegative")


@dataclass
class FilterState:
    """Direct-form realization of num(z)/den(z), coefficients ascending.

    regs[j] holds the internal sequence w at lag j+1.  Zero registers
    and zero input produce zero output indefinitely.
    """

    num: np.ndarray
    den: np.ndarray
    regs: np.ndarray = field(default=None)

    def __post_init__(self):
        self.num = np.asarray(self.num, dtype=float)
        self.den = np.asarray(self.den, dtype=float)
        if self.regs is None:
            self.regs = np.zeros(len(self.den) - 1)


def destab_filter_step(fs, u):
    """One sample through the filter.  The caller adds any dither."""
    nd = len(fs.den) - 1
    nn = len(fs.num) - 1
    # w[k] = u - sum_{i=1..nd} den[nd-i] * w[k-i]
    w_k = u
    for i in range(1, nd + 1):
        w_k -= fs.den[nd - i] * fs.regs[i - 1]
    y = 0.0
    for j in range(nn + 1):
        lag = nd - j
        y += fs.num[j] * (w_k if lag == 0 else fs.regs[lag - 1])
    if nd > 0:
        fs.regs[1:] = fs.regs[:-1]
        fs.regs[0] = w_k
    return y


class AttackChannel:
    """Runtime state for one AttackSpec inside a simulation.

    n_dgu fixes the layout of the reported vector; rng supplies every
    random draw the template needs (noise injection and filter dither),
    so a channel is deterministic given its spec and generator seed.
    """

    def __init__(self, spec, sample_period, n_dgu, rng=None):
        if spec.target_dgu > n_dgu:
            raise AttackSpecError(
                f"target_dgu {spec.target_dgu} exceeds DGU count {n_dgu}")
        self.spec = spec
        self.sample_period = float(sample_period)
        base = 2 * (spec.target_dgu - 1)
        self.indices = {"frequency": [base],
                        "voltage": [base + 1],
                        "both": [base, base + 1]}[spec.target_signal]
        self.rng = rng if rng is not None else np.random.default_rng()
        kind = spec.template["kind"]
        if kind == "destab_filter":
            num = spec.template["numerator"]
            den = spec.template["denominator"]
            self.filters = [FilterState(num, den) for _ in self.indices]
            self.mu_sigma = float(np.sqrt(spec.template.get("mu_variance", 0.0)))
        elif kind == "noise_injection":
            self.sigma = float(np.sqrt(spec.template["variance"]))
        elif kind == "replay":
            self.record_len = int(round(
                spec.template["record_seconds"] / sample_period))
            self.buffer = np.zeros((self.record_len, len(self.indices)))
            self.recorded = 0
            self._replay_base = None

    def active(self, t):
        return self.spec.start_time <= t < self.spec.end_time

    def apply(self, t, step, reported):
        """Transform the reported vector in place for time t (step index).

        Replay channels also observe the stream before their window to
        fill the recording buffer.  Only past and present samples are
        ever used.
        """
        kind = self.spec.template["kind"]
        if kind == "replay" and t < self.spec.start_time:
            rec_start = self.spec.start_time - self.spec.template["record_seconds"]
            if t >= rec_start - 0.5 * self.sample_period and \
                    self.recorded < self.record_len:
                self.buffer[self.recorded] = reported[self.indices]
                self.recorded += 1
            return reported
        if not self.active(t):
            return reported
        if kind == "passthrough":
            return reported
        if kind == "noise_injection":
            for idx in self.indices:
                reported[idx] += self.sigma * self.rng.standard_normal()
            return reported
        if kind == "replay":
            if self._replay_base is None:
                self._replay_base = step
            pos = (step - self._replay_base) % self.record_len
            reported[self.indices] = self.buffer[pos]
            return reported
        # destab_filter: filter the actual deviation, then dither
        for fs, idx in zip(self.filters, self.indices):
            y = destab_filter_step(fs, reported[idx])
            if self.mu_sigma > 0.0:
                y += self.mu_sigma * self.rng.standard_normal()
            reported[idx] = y
        return reported


def apply_attack(channel, t, step, actual):
    """Reported vector for time t given the actual one (copy, not alias)."""
    return channel.apply(t, step, actual.copy())
