"""Frequency-droop control of plug-in EV fleets.

Two levels: the single-vehicle law (kW scale, hard +/-5 kW limits reached
at +/-100 mHz) and the aggregated per-bus group law (MW scale, limits that
scale with the group gain).  Groups wake up on a fast frequency-rate
trigger and go back to sleep once both the deviation and its rate are
small; while asleep they draw nothing.

Sign convention throughout: positive power = consumption (charging),
negative = injection into the grid (discharging).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

ASLEEP = "asleep"
ACTIVE = "active"


def pev_power(df_hz: float, h_kw_per_hz: float = 50.0) -> float:
    """Single-vehicle charging power in kW for a frequency deviation.

    Piecewise linear: -5 kW at or below -0.1 Hz, h*df in between,
    +5 kW above +0.1 Hz.  The connector limit is 5 kW regardless of the
    gain; with the default 50 kW/Hz the curve is continuous.
    """
    if df_hz <= -0.1:
        return -5.0
    if df_hz <= 0.1:
        return h_kw_per_hz * df_hz
    return 5.0


def pevg_power(df_hz: float, h_mw_per_hz: float) -> float:
    """Aggregated group charging power in MW, saturating at +/-0.1*h MW."""
    if df_hz <= -0.1:
        return -0.1 * h_mw_per_hz
    if df_hz <= 0.1:
        return h_mw_per_hz * df_hz
    return 0.1 * h_mw_per_hz


def allocate_gains(h_global_mw_per_hz: float, case) -> np.ndarray:
    """Split a system-wide gain over buses in proportion to consumption.

    Returns one gain per bus (MW/Hz); zero-load buses get zero.  The gains
    sum back to the global value exactly up to rounding.
    """
    p = case.load_mw()
    if np.any(p < 0):
        bad = [case.buses[i].ext_id for i in np.nonzero(p < 0)[0]]
        raise ValueError(f"negative active load at buses {bad}; "
                         "gain allocation needs non-negative consumption")
    total = p.sum()
    if total <= 0:
        raise ValueError("cannot allocate gains: case has no active load")
    return h_global_mw_per_hz * p / total


@dataclass(frozen=True, eq=False)
class PevgConfig:
    """Group-control parameters for one run.

    ``h_global`` is the system-wide gain (MW/Hz) and ``h_i`` its per-bus
    allocation (one entry per bus, zeros where there is no group); use
    :meth:`for_case` to build both consistently.  Rates and deviations are
    in Hz/s and Hz.  ``lv_derate_v`` is the terminal voltage below which a
    group's power is derated quadratically; a converter cannot push rated
    power into a collapsed bus, and without the derate the algebraic
    network equations lose solvability during bolted faults.
    """
    h_global: float = 0.0
    h_i: np.ndarray | None = None       # MW/Hz per bus
    activation_dfdt: float = 0.1
    sleep_df: float = 0.01
    sleep_dfdt: float = 0.1
    f_sat: float = 0.1
    washout_tw: float = 0.1
    lv_derate_v: float = 0.7

    @classmethod
    def for_case(cls, case, h_global_mw_per_hz: float, **thresholds) -> "PevgConfig":
        """Allocate the global gain over the case's load buses."""
        if h_global_mw_per_hz > 0:
            h_i = allocate_gains(h_global_mw_per_hz, case)
        else:
            h_i = np.zeros(case.n_buses)
        return cls(h_global=float(h_global_mw_per_hz), h_i=h_i, **thresholds)

    def validate(self):
        if self.h_global < 0:
            raise ValueError("h_global must be non-negative")
        if self.h_i is not None:
            if np.any(np.asarray(self.h_i) < 0):
                raise ValueError("per-bus gains must be non-negative")
            total = float(np.asarray(self.h_i).sum())
            if abs(total - self.h_global) > 1e-9 * max(1.0, self.h_global):
                raise ValueError(
                    f"per-bus gains sum to {total}, expected {self.h_global}")
        for name in ("activation_dfdt", "sleep_df", "sleep_dfdt", "f_sat",
                     "washout_tw", "lv_derate_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self


@dataclass(frozen=True)
class ControllerState:
    """Per-bus group controller snapshot."""
    mode: str = ASLEEP
    filtered_df: float = 0.0      # Hz
    filtered_dfdt: float = 0.0    # Hz/s
    output_p: float = 0.0         # pu on system base, consumption positive


def update_trigger(cs: ControllerState, df: float, dfdt: float,
                   cfg: PevgConfig) -> ControllerState:
    """Advance the wake/sleep state machine for new filtered measurements.

    Asleep groups wake when |dfdt| reaches the activation rate; active
    groups sleep again only when both |df| and |dfdt| are under their
    thresholds.  A slow drift (large |df|, small |dfdt|) never wakes a
    sleeping group.
    """
    mode = cs.mode
    if mode == ASLEEP:
        if abs(dfdt) >= cfg.activation_dfdt:
            mode = ACTIVE
    else:
        if abs(df) < cfg.sleep_df and abs(dfdt) < cfg.sleep_dfdt:
            mode = ASLEEP
    return replace(cs, mode=mode, filtered_df=df, filtered_dfdt=dfdt)


def washout_frequency(theta: np.ndarray, dt: float, tw: float = 0.1) -> np.ndarray:
    """Estimate a bus frequency deviation (Hz) from its angle history.

    First-order washout s/(1 + tw*s) applied to the angle, output divided
    by 2*pi.  The filter state starts at the first sample so the estimate
    begins at zero.
    """
    theta = np.asarray(theta, dtype=float)
    a = math.exp(-dt / tw)
    x = theta[0] if theta.ndim == 1 else theta[0].copy()
    out = np.zeros_like(theta)
    for k in range(1, len(theta)):
        x = a * x + (1.0 - a) * theta[k]
        out[k] = (theta[k] - x) / tw
    return out / (2.0 * math.pi)
