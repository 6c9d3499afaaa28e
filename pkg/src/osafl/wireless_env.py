"""Device and uplink cost model: rates, computation and upload time/energy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watt_to_dbm(w: float) -> float:
    return 10.0 * math.log10(w) + 30.0


@dataclass
class DeviceCaps:
    """Static per-device budgets and workload constants.

    ``payload_bits`` is the upload size ``N * (fpp + 1)``.
    """

    cycles_per_bit: float        # c_u
    sample_bits: float           # s_u
    capacitance: float           # nu
    f_max: float                 # Hz
    p_max: float                 # W
    energy_budget: float         # J
    deadline: float              # s
    n_batches: int = 32          # n
    batch_size: int = 5          # n_bar
    n_params: int = 1
    fpp: int = 32

    def __post_init__(self):
        if self.fpp not in (16, 32, 64):
            raise ValueError(f"floating-point precision must be 16, 32 or 64 bits, got {self.fpp}")
        for name in ("cycles_per_bit", "sample_bits", "capacitance", "f_max", "p_max",
                     "deadline", "n_batches", "batch_size", "n_params"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if self.energy_budget < 0:
            raise ValueError("energy_budget must be >= 0")

    @property
    def payload_bits(self) -> float:
        return self.n_params * (self.fpp + 1)

    @property
    def cycles_per_step(self) -> float:
        """CPU cycles for one local round: n * n_bar * c * s."""
        return self.n_batches * self.batch_size * self.cycles_per_bit * self.sample_bits


@dataclass
class LinkState:
    path_gain: float    # Xi, linear
    shadowing: float    # Gamma, linear
    bandwidth: float    # omega, Hz
    noise_psd: float    # xi^2, W/Hz

    def __post_init__(self):
        if not (self.path_gain > 0 and self.shadowing > 0 and self.bandwidth > 0 and self.noise_psd > 0):
            raise ValueError("link gains, bandwidth and noise must be positive")

    @property
    def snr_per_watt(self) -> float:
        """Received SNR per watt of transmit power: Xi*Gamma / (omega*xi^2)."""
        return self.path_gain * self.shadowing / (self.bandwidth * self.noise_psd)


@dataclass
class LinkConfig:
    carrier_hz: float = 2.4e9
    ref_distance_m: float = 1.0
    pl_exponent: float = 3.0
    shadowing_db: float = 8.0
    bandwidth: float = 3 * 180e3
    noise_dbm_per_hz: float = -174.0

    @property
    def ref_loss_db(self) -> float:
        """Free-space loss at the reference distance."""
        return 20.0 * math.log10(4.0 * math.pi * self.ref_distance_m * self.carrier_hz / SPEED_OF_LIGHT)

    @property
    def noise_psd(self) -> float:
        return dbm_to_watt(self.noise_dbm_per_hz)


def path_loss_db(distance_m: float, cfg: LinkConfig) -> float:
    return cfg.ref_loss_db + 10.0 * cfg.pl_exponent * math.log10(distance_m / cfg.ref_distance_m)


def sample_link(distance_m: float, rng, cfg: LinkConfig | None = None) -> LinkState:
    """Log-distance path loss plus log-normal shadowing."""
    cfg = cfg or LinkConfig()
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    gain = 10.0 ** (-path_loss_db(distance_m, cfg) / 10.0)
    shadow_db = rng.normal(0.0, cfg.shadowing_db) if cfg.shadowing_db > 0 else 0.0
    return LinkState(gain, 10.0 ** (shadow_db / 10.0), cfg.bandwidth, cfg.noise_psd)


def uplink_rate(link: LinkState, p: float) -> float:
    if p < 0:
        raise ValueError("transmit power must be >= 0")
    return link.bandwidth * math.log2(1.0 + link.snr_per_watt * p)


def comp_time(caps: DeviceCaps, kappa: float, freq: float) -> float:
    if freq <= 0:
        raise ValueError("CPU frequency must be positive")
    return caps.cycles_per_step * kappa / freq


def comp_energy(caps: DeviceCaps, kappa: float, freq: float) -> float:
    if freq <= 0:
        raise ValueError("CPU frequency must be positive")
    return 0.5 * caps.capacitance * caps.cycles_per_step * freq ** 2 * kappa


def up_time(caps: DeviceCaps, link: LinkState, p: float) -> float:
    if p <= 0:
        raise ValueError("zero rate")
    rate = uplink_rate(link, p)
    if rate <= 0:
        raise ValueError("zero rate")
    return caps.payload_bits / rate


def up_energy(caps: DeviceCaps, link: LinkState, p: float) -> float:
    return up_time(caps, link, p) * p


def uniform_disc(n: int, radius: float, rng, min_distance: float = 1.0) -> np.ndarray:
    """Distances of ``n`` points dropped uniformly in a disc, floored at ``min_distance``."""
    r = radius * np.sqrt(rng.random(n))
    return np.maximum(r, min_distance)
