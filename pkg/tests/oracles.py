"""Independent reference evaluations used by the tests.

Everything here re-derives the cost model from its formulas with numpy
broadcasting; nothing calls into the package's optimizer.
"""

import math

import numpy as np

from osafl.wireless_env import DeviceCaps, dbm_to_watt, sample_link


def random_instance(rng, sample_bits=101376.0, deadline=200.0, radius=250.0, n_params=None):
    caps = DeviceCaps(
        cycles_per_bit=rng.uniform(25, 40), sample_bits=sample_bits, capacitance=2e-28,
        f_max=rng.uniform(1.0, 1.8) * 1e9, p_max=dbm_to_watt(rng.uniform(20, 30)),
        energy_budget=rng.uniform(1.2, 2.5), deadline=deadline,
        n_params=int(10 ** rng.uniform(3, 6.5)) if n_params is None else n_params,
    )
    link = sample_link(radius * math.sqrt(rng.random()) + 1.0, rng)
    return caps, link


def _terms(caps, link):
    cyc = caps.n_batches * caps.batch_size * caps.cycles_per_bit * caps.sample_bits
    a = link.path_gain * link.shadowing / (link.bandwidth * link.noise_psd)
    bits = caps.n_params * (caps.fpp + 1)
    return cyc, a, bits


def evaluate(caps, link, kappa, f, p, weight=0.5, slack=1e-9):
    """(objective, feasible) with broadcasting over kappa, f, p."""
    cyc, a, bits = _terms(caps, link)
    kappa, f, p = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (kappa, f, p)))
    rate = link.bandwidth * np.log2(1 + a * p)
    t_up = bits / rate
    energy = 0.5 * caps.capacitance * cyc * f ** 2 * kappa + t_up * p
    time = cyc * kappa / f + t_up
    ok = ((energy <= caps.energy_budget * (1 + slack)) & (time <= caps.deadline * (1 + slack))
          & (f <= caps.f_max) & (p <= caps.p_max))
    obj = weight * kappa / (0.5 * caps.capacitance * cyc * f ** 2) + (1 - weight) * rate / p
    return obj, ok


def grid_best(caps, link, kappa_max=5, weight=0.5, n=50):
    """Best objective on the kappa x f x p grid (f, p on n-point linear grids up to the caps)."""
    k = np.arange(1, kappa_max + 1)[:, None, None]
    f = np.linspace(caps.f_max / n, caps.f_max, n)[None, :, None]
    p = np.linspace(caps.p_max / n, caps.p_max, n)[None, None, :]
    obj, ok = evaluate(caps, link, k, f, p, weight, slack=0.0)
    if not ok.any():
        return -math.inf, False
    return float(obj[ok].max()), True


def kappa_argmax(caps, link, f, p, kappa_max=5, weight=0.5):
    """Exhaustive integer search; None when no kappa is feasible."""
    best = None
    for k in range(1, kappa_max + 1):
        obj, ok = evaluate(caps, link, k, f, p, weight, slack=0.0)
        if ok and (best is None or obj > best[1]):
            best = (k, float(obj))
    return None if best is None else best[0]


def freq_grid(caps, link, kappa, p, weight=0.5, n=10_000, zooms=4):
    """Best feasible frequency by a 10^4-point grid, zoomed around the winner ``zooms`` times."""
    lo, hi = 0.0, caps.f_max
    best = None
    for _ in range(zooms + 1):
        f = np.linspace(lo, hi, n + 1)[1:] if lo == 0 else np.linspace(lo, hi, n)
        obj, ok = evaluate(caps, link, kappa, f, p, weight, slack=0.0)
        if not ok.any():
            return best
        i = int(np.argmax(np.where(ok, obj, -np.inf)))
        best = float(f[i])
        step = f[1] - f[0]
        lo, hi = max(f[i] - step, f[0] * 1e-12), f[i]
    return best


def power_interval(caps, link, kappa, f, iters=200):
    """True feasible power interval [p_lo, p_hi] at fixed (kappa, f) by bisection; None if empty."""
    cyc, a, bits = _terms(caps, link)
    t_left = caps.deadline - cyc * kappa / f
    e_left = caps.energy_budget - 0.5 * caps.capacitance * cyc * f ** 2 * kappa
    if t_left <= 0 or e_left <= 0:
        return None

    def time_ok(p):
        return bits / (link.bandwidth * math.log2(1 + a * p)) <= t_left

    def energy_ok(p):
        return bits * p / (link.bandwidth * math.log2(1 + a * p)) <= e_left

    if not time_ok(caps.p_max):
        return None
    lo, hi = 0.0, caps.p_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if time_ok(mid) else (mid, hi)
    p_lo = hi
    if not energy_ok(p_lo):
        return None
    lo, hi = p_lo, caps.p_max
    if energy_ok(hi):
        return p_lo, hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if energy_ok(mid) else (lo, mid)
    return p_lo, lo
