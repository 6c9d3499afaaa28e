"""Per-client joint choice of local rounds, CPU frequency and transmit power.

The closed-form sub-solvers for local rounds and frequency, the SCA power
step and the alternating outer loop. A client for which no feasible plan is
found is a straggler for the round.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from osafl.wireless_env import DeviceCaps, LinkState, comp_energy, comp_time, up_energy, up_time, uplink_rate

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
# 2**500 is ~3e150; beyond that the power lower bound is meaningless
MAX_RATE_EXPONENT = 500.0


class InfeasibleError(ValueError):
    """No point satisfies the constraints of a (sub-)problem."""


@dataclass
class OptimConfig:
    weight: float = 0.5            # epsilon: computation vs. energy-efficiency trade-off
    kappa_max: int = 5
    outer_iters: int = 20          # I
    sca_iters: int = 30            # J
    sca_tol: float = 1e-6          # varpi_0, watts
    outer_tol: float = 1e-6        # varpi_1, relative objective change
    f_init: float | None = None    # defaults to f_max / 2
    p_init: float | None = None    # defaults to p_max / 2
    refine: bool = True            # also solve the frequency-eliminated problem by power scan
    scan_points: int = 96
    freq_starts: int = 7           # extra frequency starts, geometric in [f_max/64, f_max]
    rtol: float = 1e-9             # constraint tolerance when verifying plans

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")
        if self.outer_iters < 1 or self.sca_iters < 1 or self.kappa_max < 1 or self.scan_points < 2:
            raise ValueError("iteration counts and kappa_max must be >= 1, scan_points >= 2")
        if self.sca_tol <= 0 or self.outer_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ResourcePlan:
    kappa: int
    freq: float
    power: float
    feasible: bool
    objective: float
    iterations: int = 0

    @classmethod
    def straggler(cls, iterations=0):
        return cls(0, 0.0, 0.0, False, -math.inf, iterations)


def _energy_per_round(caps: DeviceCaps) -> float:
    """0.5 * nu * n * n_bar * c * s: computation energy per local round per Hz^2."""
    return 0.5 * caps.capacitance * caps.cycles_per_step


def energy_efficiency(link: LinkState, p: float) -> float:
    return uplink_rate(link, p) / p


def objective(caps, link, kappa, freq, p, weight) -> float:
    if freq <= 0 or p <= 0:
        raise ValueError("frequency and power must be positive")
    return (weight * kappa / (_energy_per_round(caps) * freq ** 2)
            + (1.0 - weight) * energy_efficiency(link, p))


def check_constraints(caps, link, kappa, freq, p, kappa_max, rtol=1e-9) -> bool:
    """All five constraints evaluated with the exact (non-linearised) formulas."""
    if not (1 <= kappa <= kappa_max) or freq <= 0 or p <= 0:
        return False
    if freq > caps.f_max * (1 + rtol) or p > caps.p_max * (1 + rtol):
        return False
    energy = comp_energy(caps, kappa, freq) + up_energy(caps, link, p)
    time = comp_time(caps, kappa, freq) + up_time(caps, link, p)
    return (energy <= caps.energy_budget * (1 + rtol) + 1e-12
            and time <= caps.deadline * (1 + rtol))


def kappa_bounds(caps, link, freq, p) -> tuple[float, float]:
    """The energy- and deadline-imposed upper bounds on local rounds at (freq, p)."""
    by_energy = (caps.energy_budget - up_energy(caps, link, p)) / (_energy_per_round(caps) * freq ** 2)
    by_deadline = freq * (caps.deadline - up_time(caps, link, p)) / caps.cycles_per_step
    return by_energy, by_deadline


def optimal_kappa(caps, link, freq, p, kappa_max) -> int:
    if freq <= 0 or p <= 0:
        raise ValueError("frequency and power must be positive")
    by_energy, by_deadline = kappa_bounds(caps, link, freq, p)
    kappa_c = min(kappa_max, by_energy, by_deadline)
    # absorb round-off when a bound lands exactly on an integer
    kappa = math.floor(kappa_c + 1e-9)
    if kappa < 1:
        raise InfeasibleError(f"local-round bound {kappa_c:.4g} < 1")
    return int(kappa)


def optimal_freq(caps, link, kappa, p) -> float:
    """Smallest frequency meeting the deadline; the objective decreases in frequency."""
    if kappa < 1 or p <= 0:
        raise ValueError("need kappa >= 1 and p > 0")
    rate = uplink_rate(link, p)
    denom = caps.deadline * rate - caps.payload_bits
    if denom <= 0:
        raise InfeasibleError("upload alone exceeds the deadline")
    freq = caps.cycles_per_step * kappa * rate / denom
    if freq > caps.f_max * (1 + 1e-12):
        raise InfeasibleError(f"required frequency {freq:.4g} Hz exceeds f_max")
    freq = min(freq, caps.f_max)
    if comp_energy(caps, kappa, freq) + up_energy(caps, link, p) > caps.energy_budget * (1 + 1e-12):
        raise InfeasibleError("energy budget exceeded at the deadline-tight frequency")
    return freq


def linearized_ee(caps, link, p, p_ref) -> float:
    """First-order expansion of omega*log2(1 + a p)/p around ``p_ref``."""
    a = link.snr_per_watt
    L = math.log1p(a * p_ref)
    slope = a / (p_ref * (1.0 + a * p_ref)) - L / p_ref ** 2
    return link.bandwidth / LN2 * (L / p_ref + slope * (p - p_ref))


def linearized_up_energy(caps, link, p, p_ref) -> float:
    """First-order expansion of the upload energy N(FPP+1) p / rate(p) around ``p_ref``."""
    a = link.snr_per_watt
    L = math.log1p(a * p_ref)
    coeff = caps.payload_bits * LN2 / (link.bandwidth * L)
    return coeff * (p_ref + (1.0 - a * p_ref / (L * (1.0 + a * p_ref))) * (p - p_ref))


def power_lower_bound(caps, link, kappa, freq) -> float:
    """Smallest power whose rate lets the upload finish within the deadline."""
    slack = caps.deadline * freq - caps.cycles_per_step * kappa
    if slack <= 0:
        raise InfeasibleError("computation alone exceeds the deadline")
    exponent = caps.payload_bits * freq / (link.bandwidth * slack)
    if exponent > MAX_RATE_EXPONENT:
        raise InfeasibleError("required rate is astronomically high")
    return math.expm1(exponent * LN2) / link.snr_per_watt


@dataclass
class ScaTrace:
    iterates: list = field(default_factory=list)
    intervals: list = field(default_factory=list)


def sca_power(caps, link, kappa, freq, cfg: OptimConfig | None = None, p_init=None, trace=None) -> float:
    """Transmit power by successive linearisation of the power sub-problem.

    Each surrogate is affine in ``p`` over ``[p_lo, p_hi]``, so it is solved
    by picking the better endpoint. ``trace`` (a :class:`ScaTrace`) records
    the iterates and intervals.
    """
    cfg = cfg or OptimConfig()
    if kappa < 1 or freq <= 0:
        raise ValueError("need kappa >= 1 and freq > 0")
    p_lo = power_lower_bound(caps, link, kappa, freq)
    if p_lo > caps.p_max * (1 + cfg.rtol):
        raise InfeasibleError("deadline needs more than p_max")
    e_comp = comp_energy(caps, kappa, freq)

    p_j = caps.p_max / 2 if p_init is None else float(p_init)
    p_j = min(max(p_j, p_lo), caps.p_max)
    if e_comp + up_energy(caps, link, p_j) > caps.energy_budget:
        # start from a truly feasible point when the suggested one is not
        p_j = p_lo

    for _ in range(cfg.sca_iters):
        a = link.snr_per_watt
        L = math.log1p(a * p_j)
        e_slope = caps.payload_bits * LN2 / (link.bandwidth * L) * (1.0 - a * p_j / (L * (1.0 + a * p_j)))
        e_at_ref = linearized_up_energy(caps, link, p_j, p_j)
        p_hi = min(caps.p_max, p_j + (caps.energy_budget - e_comp - e_at_ref) / e_slope)
        if trace is not None:
            trace.intervals.append((p_lo, p_hi))
        if p_lo > p_hi * (1 + cfg.rtol):
            raise InfeasibleError("linearised power interval is empty")
        obj_slope = (1.0 - cfg.weight) * (a / (p_j * (1.0 + a * p_j)) - L / p_j ** 2)
        p_next = p_hi if obj_slope > 0 else min(p_lo, p_hi)
        if trace is not None:
            trace.iterates.append(p_next)
        done = abs(p_next - p_j) < cfg.sca_tol
        p_j = p_next
        if done:
            break

    if not check_constraints(caps, link, kappa, freq, p_j, cfg.kappa_max, cfg.rtol):
        raise InfeasibleError("SCA solution violates the exact constraints")
    return p_j


def _alternate(caps, link, cfg, f, p):
    """The alternating kappa -> freq -> power loop from one starting point."""
    best = None
    prev_obj = None
    for i in range(1, cfg.outer_iters + 1):
        try:
            kappa = optimal_kappa(caps, link, f, p, cfg.kappa_max)
            f = optimal_freq(caps, link, kappa, p)
            p = sca_power(caps, link, kappa, f, cfg, p_init=p)
        except InfeasibleError as exc:
            log.debug("iteration %d infeasible: %s", i, exc)
            break
        obj = objective(caps, link, kappa, f, p, cfg.weight)
        if best is None or obj > best.objective:
            best = ResourcePlan(kappa, f, p, True, obj, i)
        if prev_obj is not None and abs(obj - prev_obj) <= cfg.outer_tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj
    return best


def _reduced_objective(caps, link, kappa, p, weight):
    """Objective with the frequency set deadline-tight; NaN where infeasible (vectorised in p)."""
    p = np.asarray(p, dtype=float)
    a = link.snr_per_watt
    rate = link.bandwidth * np.log2(1.0 + a * p)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_up = caps.payload_bits / rate
        freq = caps.cycles_per_step * kappa / (caps.deadline - t_up)
        energy = _energy_per_round(caps) * kappa * freq ** 2 + t_up * p
        ok = ((t_up < caps.deadline) & (freq <= caps.f_max) & (p <= caps.p_max) & (p > 0)
              & (energy <= caps.energy_budget))
        obj = weight * kappa / (_energy_per_round(caps) * freq ** 2) + (1.0 - weight) * rate / p
    return np.where(ok, obj, np.nan), freq


def _feasible_edge(caps, link, kappa, inside, outside, weight, iters=60):
    """Bisect between a feasible and an infeasible power; returns the last feasible one."""
    for _ in range(iters):
        mid = 0.5 * (inside + outside)
        if np.isnan(_reduced_objective(caps, link, kappa, mid, weight)[0]):
            outside = mid
        else:
            inside = mid
    return inside


def refine_plan(caps, link, cfg: OptimConfig, kappas=None):
    """Best plan of the problem with frequency eliminated, searched over power per kappa.

    For fixed (kappa, p) the deadline-tight frequency is optimal, leaving a
    one-dimensional problem in p for each integer kappa: scan it, locate the
    feasible interval around the best scan point by bisection, then polish.
    """
    grid = np.unique(np.concatenate([
        np.geomspace(caps.p_max * 1e-6, caps.p_max, cfg.scan_points),
        np.linspace(caps.p_max / cfg.scan_points, caps.p_max, cfg.scan_points),
    ]))
    best = None
    for kappa in (range(1, cfg.kappa_max + 1) if kappas is None else kappas):
        obj, _ = _reduced_objective(caps, link, kappa, grid, cfg.weight)
        if np.all(np.isnan(obj)):
            continue
        i = int(np.nanargmax(obj))
        lo = grid[i - 1] if i > 0 else 0.0
        hi = grid[i + 1] if i < grid.size - 1 else caps.p_max
        if lo > 0 and np.isnan(obj[i - 1]):
            lo = _feasible_edge(caps, link, kappa, grid[i], lo, cfg.weight)
        if i < grid.size - 1 and np.isnan(obj[i + 1]):
            hi = _feasible_edge(caps, link, kappa, grid[i], hi, cfg.weight)
        candidates = [grid[i], hi]
        if lo > 0:
            candidates.append(lo)
        if hi > lo:
            def neg(p):
                v = float(_reduced_objective(caps, link, kappa, p, cfg.weight)[0])
                # finite penalty keeps the bracketing arithmetic warning-free
                return 1e300 if math.isnan(v) else -v
            res = minimize_scalar(neg, bounds=(max(lo, grid[i] * 1e-3), hi), method="bounded",
                                  options={"xatol": 1e-10 * hi})
            candidates.append(float(res.x))
        for p in candidates:
            v, freq = _reduced_objective(caps, link, kappa, p, cfg.weight)
            v = float(v)
            freq = float(freq)
            if np.isnan(v) or not check_constraints(caps, link, kappa, freq, float(p), cfg.kappa_max, cfg.rtol):
                continue
            if best is None or v > best.objective:
                best = ResourcePlan(kappa, freq, float(p), True, v)
    return best


def optimize(caps: DeviceCaps, link: LinkState, cfg: OptimConfig | None = None) -> ResourcePlan:
    """Joint plan for one client; infeasibility yields a straggler plan, not an error.

    Runs the alternating kappa -> frequency -> power loop from the configured
    start and, with ``cfg.refine``, compares it against :func:`refine_plan`
    (also used as a restart point). The better feasible plan is returned.
    """
    cfg = cfg or OptimConfig()
    if caps.energy_budget <= 0:
        return ResourcePlan.straggler()
    f0 = caps.f_max / 2 if cfg.f_init is None else min(cfg.f_init, caps.f_max)
    p0 = caps.p_max / 2 if cfg.p_init is None else min(cfg.p_init, caps.p_max)

    starts = [(f0, p0)]
    if cfg.refine:
        starts += [(f, p0) for f in np.geomspace(caps.f_max / 64, caps.f_max, cfg.freq_starts)]
    best = None
    kappas = set()
    for f, p in starts:
        plan = _alternate(caps, link, cfg, float(f), p)
        if plan is None:
            continue
        kappas.add(plan.kappa)
        if best is None or plan.objective > best.objective:
            best = plan
    if cfg.refine:
        # power refinement at every kappa the loop settled on; all kappas if none
        scanned = refine_plan(caps, link, cfg, sorted(kappas) if kappas else None)
        if scanned is not None and (best is None or scanned.objective > best.objective):
            best = scanned
    if best is None:
        return ResourcePlan.straggler(cfg.outer_iters)
    return best
