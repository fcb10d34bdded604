"""Discrete droop control and the private command watermark.

Each DGU owns one DroopState and one WatermarkSource; neither is shared.
The droop law is proportional plus accumulated deviation, and the running
sums include the current sample:

    dP_ref[k] = alpha_p * dw[k] + beta_p * Ts * sum_{j<=k} dw[j]
    dQ_ref[k] = alpha_q * dv[k] + beta_q * Ts * sum_{j<=k} dv[j]

The watermark is an i.i.d. zero-mean Gaussian 2-vector added to the
command pair after the droop evaluation.  Its draw log is the detector's
private reference; nothing in attack_channel accepts a WatermarkSource,
which is the secrecy boundary: attacks can observe measurement streams
but never the watermark records.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DroopState:
    alpha_p: float
    beta_p: float
    alpha_q: float
    beta_q: float
    sample_period: float
    sum_freq: float = 0.0
    sum_volt: float = 0.0

    def reset(self):
        self.sum_freq = 0.0
        self.sum_volt = 0.0


def droop_step(st, dw, dv):
    """One controller evaluation on measured deviations (dw rad/s, dv pu).

    Updates the running sums first, then evaluates the law, so the
    accumulator includes the current sample.  Returns (dP_ref, dQ_ref).
    """
    st.sum_freq += dw
    st.sum_volt += dv
    dp = st.alpha_p * dw + st.beta_p * st.sample_period * st.sum_freq
    dq = st.alpha_q * dv + st.beta_q * st.sample_period * st.sum_volt
    return dp, dq


class WatermarkSource:
    """Private watermark stream: i.i.d. N(0, nu_e) per channel.

    channels selects which command components carry the watermark:
    "both" (default), "active" (P only) or "reactive" (Q only).  Every
    draw is appended to .log so the local detector can replay the exact
    sequence; the log is never handed to attack code.
    """

    def __init__(self, nu_e, seed, channels="both"):
        if nu_e < 0:
            raise ValueError("watermark variance must be nonnegative")
        if channels not in ("both", "active", "reactive"):
            raise ValueError(f"unknown watermark channel selection {channels!r}")
        self.nu_e = float(nu_e)
        self.channels = channels
        self._rng = np.random.default_rng(seed)
        self._sigma = float(np.sqrt(nu_e))
        self._mask = {"both": np.ones(2),
                      "active": np.array([1.0, 0.0]),
                      "reactive": np.array([0.0, 1.0])}[channels]
        self.log = []

    def draw(self):
        e = self._rng.standard_normal(2) * self._sigma * self._mask
        self.log.append(e)
        return e


def inject_watermark(cmd, wm):
    """Add the next watermark draw to a (dP_ref, dQ_ref) command pair."""
    e = wm.draw()
    return (cmd[0] + e[0], cmd[1] + e[1])


def gain_matrices(droops, sample_period=None):
    """Stacked droop gain matrices for n controllers.

    droops is a list of objects carrying alpha_p/beta_p/alpha_q/beta_q
    (DguModel or DroopState both qualify).  Returns (Da, Db) with the
    proportional and accumulator gains on the diagonal, ordered
    (freq, volt) per DGU.  The one-step command map of the stacked loop
    is (Da + Ts*Db) on the current sample plus Ts*Db on the carried sum.
    """
    n = len(droops)
    Da = np.zeros((2 * n, 2 * n))
    Db = np.zeros((2 * n, 2 * n))
    for k, d in enumerate(droops):
        Da[2 * k, 2 * k] = d.alpha_p
        Da[2 * k + 1, 2 * k + 1] = d.alpha_q
        Db[2 * k, 2 * k] = d.beta_p
        Db[2 * k + 1, 2 * k + 1] = d.beta_q
    return Da, Db
