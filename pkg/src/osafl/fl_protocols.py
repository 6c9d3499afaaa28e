"""Server/client round logic for OSAFL, the modified baselines and the genie.

Gradient-space protocols (OSAFL, FedNova, AFA-CD) keep one normalized
accumulated gradient per client in the server buffer; model-space protocols
(FedAvg, FedProx, FedDisco) keep one model per client. In both, a client
that skips a round leaves its latest contribution in place, and a client
that never contributed is represented by the current global model.

Rounds return a new :class:`ServerState`; nothing here mutates client data.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from osafl import core_ml
from osafl.content_gen import FifoBuffer
from osafl.resource_opt import OptimConfig, ResourcePlan, optimize
from osafl.seeding import GENIE, TRAIN, keyed_rng
from osafl.wireless_env import DeviceCaps, LinkState

log = logging.getLogger(__name__)

PROTOCOLS = ("osafl", "fedavg", "fedprox", "fednova", "afacd", "feddisco", "genie")
GRADIENT_SPACE = frozenset({"osafl", "fednova", "afacd"})


@dataclass
class ClientState:
    uid: int
    caps: DeviceCaps
    link: LinkState
    dataset: FifoBuffer
    distance: float = 1.0
    stream: object = None      # RequestStream feeding the dataset
    arrivals: object = None    # ArrivalConfig
    plan: ResourcePlan | None = None


@dataclass
class ServerState:
    w: np.ndarray
    buffer: list
    participated: list
    alpha: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if len(self.buffer) != len(self.participated) or len(self.buffer) != self.alpha.size:
            raise ValueError("buffer, participation flags and weights must have one entry per client")
        if abs(self.alpha.sum() - 1.0) > 1e-12 or np.any(self.alpha < 0):
            raise ValueError("aggregation weights must be non-negative and sum to 1")

    @property
    def n_clients(self) -> int:
        return len(self.buffer)

    @classmethod
    def init(cls, w0, n_clients: int, lr: float | None = None, alpha=None) -> "ServerState":
        """Fresh state; ``lr`` given means a gradient-space buffer of ``w0 / lr``."""
        if n_clients < 1:
            raise ValueError("need at least one client")
        w0 = np.array(w0, dtype=float, copy=True)
        entry = w0 if lr is None else w0 / lr
        if alpha is None:
            alpha = np.full(n_clients, 1.0 / n_clients)
        return cls(w0, [entry] * n_clients, [False] * n_clients, alpha)


@dataclass(frozen=True)
class Score:
    lam: float
    delta: float

    @property
    def b_term(self) -> float:
        """(delta - lam)^2 + lam^2, the per-client factor in the convergence bound."""
        return (self.delta - self.lam) ** 2 + self.lam ** 2


@dataclass
class ScoreConfig:
    """``mode``: ``direct`` (delta = lam), ``generalized`` or ``unit`` (delta = 1)."""

    mode: str = "direct"
    chi: float = 1.0
    beta: float = 1.0
    sigma2: float = 1.0
    rho1: float = 1.0
    rho2: float = 0.0
    lr: float = 0.1
    global_lr: float = 1.0
    gamma: float = 0.0
    phi: float = 0.0
    delta_het: float = 0.0

    def __post_init__(self):
        if self.mode not in ("direct", "generalized", "unit"):
            raise ValueError(f"unknown score mode {self.mode!r}")
        if self.chi < 1:
            raise ValueError("chi must be >= 1")
        for name in ("beta", "sigma2", "rho1", "rho2", "lr", "global_lr", "gamma", "phi", "delta_het"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class ClientRecord:
    uid: int
    kappa: int
    feasible: bool
    d_norm: float = math.nan
    lam: float = math.nan
    delta: float = math.nan

    @property
    def b_term(self) -> float:
        return (self.delta - self.lam) ** 2 + self.lam ** 2


@dataclass
class RoundReport:
    clients: list = field(default_factory=list)
    train_loss: float = math.nan
    test_loss: float = math.nan
    test_accuracy: float = math.nan

    @property
    def straggler_count(self) -> int:
        return sum(not c.feasible for c in self.clients)

    @property
    def mean_kappa(self) -> float:
        return float(np.mean([c.kappa for c in self.clients])) if self.clients else math.nan

    @property
    def mean_lambda(self) -> float:
        lams = [c.lam for c in self.clients if not math.isnan(c.lam)]
        return float(np.mean(lams)) if lams else math.nan


@dataclass
class RoundConfig:
    """Knobs shared by every protocol round.

    ``global_lr`` is the server-side rate: eta-tilde for OSAFL, the global
    rate for AFA-CD and the slowdown tau-tilde for FedNova.
    """

    spec: core_ml.ModelSpec
    lr: float
    global_lr: float = 1.0
    batch_size: int = 5
    mu: float = 0.0
    disco_a: float = 0.2
    disco_b: float = 0.1
    score: ScoreConfig = field(default_factory=ScoreConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    forced_kappa: int | None = None
    genie_steps: int | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.global_lr < 0 or self.mu < 0:
            raise ValueError("learning rates must be positive and mu >= 0")
        if self.forced_kappa is not None and self.forced_kappa < 0:
            raise ValueError("forced_kappa must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class Upload:
    uid: int
    kappa: int
    w_final: np.ndarray | None = None
    d: np.ndarray | None = None

    @property
    def feasible(self) -> bool:
        return self.kappa >= 1


# scores ------------------------------------------------------------------

def mean_update(buffer) -> np.ndarray:
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    return np.mean(np.stack(buffer), axis=0)


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    # scale by the largest entry first so squares neither underflow nor overflow
    ma = np.max(np.abs(a))
    mb = np.max(np.abs(b))
    if ma == 0.0 or mb == 0.0:
        return None
    a = a / ma
    b = b / mb
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def generalized_coefficient(cfg: ScoreConfig, alpha: float, kappa: float) -> float:
    bek2 = (cfg.beta * cfg.lr * kappa) ** 2
    return (8 * alpha * kappa * cfg.beta ** 2 * cfg.lr ** 2 * cfg.sigma2
            + 64 * alpha * cfg.phi * bek2
            + 32 * cfg.rho2 * alpha * cfg.delta_het * bek2
            + 32 * cfg.rho1 * alpha * bek2)


def compute_scores(buffer, cfg: ScoreConfig | None = None, alpha=None, kappas=None) -> list[Score]:
    """Similarity ``lam`` of each buffered update to the mean, and the score ``delta``.

    ``alpha`` and ``kappas`` are only needed in generalized mode.
    """
    cfg = cfg or ScoreConfig()
    d_bar = mean_update(buffer)
    U = len(buffer)
    if cfg.mode == "generalized":
        alpha = np.full(U, 1.0 / U) if alpha is None else np.asarray(alpha, dtype=float)
        kappas = np.ones(U) if kappas is None else np.asarray(kappas, dtype=float)
    scores = []
    for u, d_u in enumerate(buffer):
        cos = _cosine(d_bar, d_u)
        if cos is None:
            log.warning("zero-norm update for client %d; cosine taken as 0", u)
            cos = 0.0
        lam = (cfg.chi + cos) / (cfg.chi + 1.0)
        if cfg.mode == "direct":
            delta = lam
        elif cfg.mode == "unit":
            delta = 1.0
        else:
            c_u = generalized_coefficient(cfg, alpha[u], kappas[u])
            base = 2 * cfg.beta * cfg.lr * cfg.global_lr * cfg.sigma2 * alpha[u] ** 2
            if base + c_u == 0:
                raise ValueError("generalized score undefined: all coefficients are zero")
            delta = (cfg.gamma + c_u * lam) / (base + c_u)
        scores.append(Score(lam, delta))
    return scores


# client phase ------------------------------------------------------------

def fedprox_local(spec, w_init, w_anchor, X, y, kappa, lr, mu, batch_size, rng) -> np.ndarray:
    """Local SGD on f_u + (mu/2)||w - w_anchor||^2."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    w_anchor = np.asarray(w_anchor, dtype=float)

    def grad_fn(w, Xb, yb):
        return core_ml.gradient(spec, w, Xb, yb) + mu * (w - w_anchor)

    w_final, _ = core_ml.sgd_trajectory(spec, w_init, X, y, kappa, lr, batch_size, rng, grad_fn)
    return w_final


def plan_for(client: ClientState, cfg: RoundConfig) -> ResourcePlan:
    if cfg.forced_kappa is not None:
        k = cfg.forced_kappa
        return ResourcePlan(k, math.nan, math.nan, k >= 1, math.nan)
    if client.plan is None:
        client.plan = optimize(client.caps, client.link, cfg.optim)
    return client.plan


def _train_one(client: ClientState, w, cfg: RoundConfig, t: int, proximal: bool) -> Upload:
    kappa = plan_for(client, cfg).kappa
    if kappa < 1:
        return Upload(client.uid, 0)
    X, y = client.dataset.arrays()
    rng = keyed_rng(cfg.seed, TRAIN, client.uid, t)
    if proximal:
        w_final = fedprox_local(cfg.spec, w, w, X, y, kappa, cfg.lr, cfg.mu, cfg.batch_size, rng)
        d = (w - w_final) / (cfg.lr * kappa)
    else:
        w_final, d = core_ml.local_train(cfg.spec, w, X, y, kappa, cfg.lr, cfg.batch_size, rng)
    return Upload(client.uid, kappa, w_final, d)


def client_phase(server: ServerState, clients, cfg: RoundConfig, proximal: bool = False) -> list[Upload]:
    """Plan and train every client on ``server.w``; ordered by client, worker-count independent."""
    w = server.w

    def work(client):
        return _train_one(client, w, cfg, server.t, proximal)

    if cfg.workers == 1 or len(clients) == 1:
        return [work(c) for c in clients]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(work, clients))


def _commit(server: ServerState, uploads, gradient_space: bool, lr: float):
    """Buffer update for one round: fresh uploads in, never-seen stragglers reset."""
    buffer = list(server.buffer)
    participated = list(server.participated)
    for up in uploads:
        if up.feasible:
            buffer[up.uid] = up.d if gradient_space else up.w_final
            participated[up.uid] = True
        elif not participated[up.uid]:
            buffer[up.uid] = server.w / lr if gradient_space else server.w.copy()
    return buffer, participated


def _records(uploads) -> list[ClientRecord]:
    return [ClientRecord(up.uid, up.kappa, up.feasible,
                         float(np.linalg.norm(up.d)) if up.d is not None else math.nan)
            for up in uploads]


def _check_population(server: ServerState, clients):
    if [c.uid for c in clients] != list(range(server.n_clients)):
        raise ValueError("clients must be ordered with uids 0..U-1 matching the server buffer")


# aggregation -------------------------------------------------------------

def score_step(w, buffer, weights, lr, global_lr) -> np.ndarray:
    """w - global_lr * lr * sum_u weights[u] * buffer[u]."""
    return w - (global_lr * lr) * (np.asarray(weights, dtype=float) @ np.stack(buffer))


def afacd_aggregate(server: ServerState, buffer, global_lr: float) -> np.ndarray:
    U = len(buffer)
    return score_step(server.w, buffer, np.full(U, 1.0 / U), 1.0, global_lr)


def fednova_aggregate(w, buffer, kappas, sizes, lr: float, slowdown: float) -> np.ndarray:
    p = np.asarray(sizes, dtype=float)
    p = p / p.sum()
    pk = p * np.asarray(kappas, dtype=float)
    total = pk.sum()
    if total <= 0:
        return np.array(w, dtype=float, copy=True)
    return w - slowdown * total * lr * ((pk / total) @ np.stack(buffer))


def label_discrepancy(hist) -> float:
    """L2 distance between a label distribution and the uniform one."""
    hist = np.asarray(hist, dtype=float)
    return float(np.linalg.norm(hist - 1.0 / hist.size))


def feddisco_weights(label_hists, sizes, a: float = 0.2, b: float = 0.1) -> np.ndarray:
    if a < 0 or b < 0:
        raise ValueError("a and b must be >= 0")
    sizes = np.asarray(sizes, dtype=float)
    p = sizes / sizes.sum()
    disc = np.array([label_discrepancy(h) for h in label_hists])
    raw = np.maximum(p - a * disc + b, 0.0)
    if raw.sum() <= 0:
        raise ValueError("degenerate disco weights")
    return raw / raw.sum()


def label_histogram(y, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=n_classes).astype(float)
    return counts / counts.sum()


# rounds ------------------------------------------------------------------

def osafl_round(server: ServerState, clients, cfg: RoundConfig):
    _check_population(server, clients)
    uploads = client_phase(server, clients, cfg)
    buffer, participated = _commit(server, uploads, True, cfg.lr)
    score_cfg = replace(cfg.score, lr=cfg.lr, global_lr=cfg.global_lr)
    kappas = [max(up.kappa, 1) for up in uploads]
    scores = compute_scores(buffer, score_cfg, server.alpha, kappas)
    weights = server.alpha * np.array([s.delta for s in scores])
    w_next = score_step(server.w, buffer, weights, cfg.lr, cfg.global_lr)
    records = _records(uploads)
    for rec, s in zip(records, scores):
        rec.lam, rec.delta = s.lam, s.delta
    return ServerState(w_next, buffer, participated, server.alpha, server.t + 1), RoundReport(records)


def fedavg_round(server: ServerState, clients, cfg: RoundConfig, proximal: bool = False):
    _check_population(server, clients)
    uploads = client_phase(server, clients, cfg, proximal)
    buffer, participated = _commit(server, uploads, False, cfg.lr)
    w_next = mean_update(buffer)
    return ServerState(w_next, buffer, participated, server.alpha, server.t + 1), RoundReport(_records(uploads))


def fedprox_round(server: ServerState, clients, cfg: RoundConfig):
    return fedavg_round(server, clients, cfg, proximal=True)


def fednova_round(server: ServerState, clients, cfg: RoundConfig):
    _check_population(server, clients)
    uploads = client_phase(server, clients, cfg)
    buffer, participated = _commit(server, uploads, True, cfg.lr)
    sizes = [len(c.dataset) for c in clients]
    w_next = fednova_aggregate(server.w, buffer, [up.kappa for up in uploads], sizes, cfg.lr, cfg.global_lr)
    return ServerState(w_next, buffer, participated, server.alpha, server.t + 1), RoundReport(_records(uploads))


def afacd_round(server: ServerState, clients, cfg: RoundConfig):
    _check_population(server, clients)
    uploads = client_phase(server, clients, cfg)
    buffer, participated = _commit(server, uploads, True, cfg.lr)
    w_next = afacd_aggregate(server, buffer, cfg.global_lr)
    return ServerState(w_next, buffer, participated, server.alpha, server.t + 1), RoundReport(_records(uploads))


def feddisco_round(server: ServerState, clients, cfg: RoundConfig):
    _check_population(server, clients)
    uploads = client_phase(server, clients, cfg)
    buffer, participated = _commit(server, uploads, False, cfg.lr)
    n_classes = cfg.spec.n_classes
    hists = [label_histogram(c.dataset.arrays()[1], n_classes) for c in clients]
    alpha = feddisco_weights(hists, [len(c.dataset) for c in clients], cfg.disco_a, cfg.disco_b)
    w_next = alpha @ np.stack(buffer)
    return ServerState(w_next, buffer, participated, server.alpha, server.t + 1), RoundReport(_records(uploads))


def centralized_round(spec, X, y, w, lr, n_steps, batch_size, rng) -> np.ndarray:
    """``n_steps`` SGD steps on the pooled data."""
    if n_steps <= 0:
        return np.array(w, dtype=float, copy=True)
    w_next, _ = core_ml.sgd_trajectory(spec, w, X, y, n_steps, lr, batch_size, rng)
    return w_next


def genie_round(server: ServerState, clients, cfg: RoundConfig):
    """Genie baseline: pooled buffers, as many SGD steps as the clients' total budget."""
    _check_population(server, clients)
    plans = [plan_for(c, cfg) for c in clients]
    steps = sum(p.kappa for p in plans) if cfg.genie_steps is None else cfg.genie_steps
    parts = [c.dataset.arrays() for c in clients]
    X = np.vstack([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    w_next = centralized_round(cfg.spec, X, y, server.w, cfg.lr, steps, cfg.batch_size,
                               keyed_rng(cfg.seed, GENIE, 0, server.t))
    records = [ClientRecord(c.uid, p.kappa, p.feasible) for c, p in zip(clients, plans)]
    return ServerState(w_next, server.buffer, server.participated, server.alpha, server.t + 1), RoundReport(records)


ROUNDS = {
    "osafl": osafl_round,
    "fedavg": fedavg_round,
    "fedprox": fedprox_round,
    "fednova": fednova_round,
    "afacd": afacd_round,
    "feddisco": feddisco_round,
    "genie": genie_round,
}


def init_server(protocol: str, w0, n_clients: int, lr: float) -> ServerState:
    if protocol not in ROUNDS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    return ServerState.init(w0, n_clients, lr if protocol in GRADIENT_SPACE else None)


def run_round(protocol: str, server: ServerState, clients, cfg: RoundConfig):
    return ROUNDS[protocol](server, clients, cfg)
