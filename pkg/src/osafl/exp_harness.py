"""Experiment configuration, population construction, the round loop and metric files.

All protocols of a run advance in lockstep over one shared population:
datasets, links and resource plans depend only on ``(seed, client, round)``,
so each round they are computed once and every protocol sees the same data.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from osafl import core_ml, seeding
from osafl.content_gen import (ArrivalConfig, ContentCatalog, FifoBuffer, RequestStream, UserProfile,
                               arrivals_this_round, dataset1_feature_dim, dataset2_sample_bits,
                               write_stream_records)
from osafl.fl_protocols import PROTOCOLS, ClientState, RoundConfig, ScoreConfig, init_server, run_round
from osafl.resource_opt import OptimConfig, optimize
from osafl.wireless_env import DeviceCaps, LinkConfig, dbm_to_watt, sample_link, uniform_disc

log = logging.getLogger(__name__)

METRIC_FIELDS = ("round", "protocol", "test_accuracy", "test_loss", "train_loss",
                 "straggler_count", "mean_kappa", "mean_lambda")
SUMMARY_FIELDS = ("round", "protocol", "n_trials",
                  "test_accuracy_mean", "test_accuracy_std", "test_loss_mean", "test_loss_std",
                  "train_loss_mean", "train_loss_std", "straggler_count_mean", "mean_kappa_mean")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


# configuration -----------------------------------------------------------

@dataclass
class CatalogSection:
    n_files: int = 100
    n_genres: int = 5
    feature_dim: int = 64
    genre_feature_dim: int = 8
    genre_spread: float = 0.5
    zipf_gamma: float = 1.0
    zipf_q: float = 2.0
    top_k: int = 1
    dirichlet: float = 0.3
    epsilon_range: tuple = (0.4, 0.9)
    history: int = 10


@dataclass
class DeviceSection:
    radius_m: float = 250.0
    dataset_size: tuple = (320, 640)
    arrival_prob: tuple = (0.3, 0.8)
    arrival_slots: int = 32
    cycles_per_bit: tuple = (25.0, 40.0)
    energy_budget: tuple = (1.2, 2.5)
    f_max_ghz: tuple = (1.0, 1.8)
    p_max_dbm: tuple = (20.0, 30.0)
    deadline: float = 200.0
    capacitance: float = 2e-28
    n_batches: int = 32
    batch_size: int = 5
    fpp: int = 32


@dataclass
class LinkSection:
    carrier_hz: float = 2.4e9
    pl_exponent: float = 3.0
    shadowing_db: float = 8.0
    bandwidth: float = 540e3
    noise_dbm_per_hz: float = -174.0


@dataclass
class ProtocolSection:
    lr: float = 0.1
    global_lr: float = 1.0
    mu: float = 0.0
    a: float = 0.2
    b: float = 0.1
    steps: int | None = None
    batch_size: int | None = None   # overrides devices.batch_size for this protocol

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    protocols: tuple = ("osafl",)
    rounds: int = 10
    clients: int = 10
    seed: int = 0
    trials: int = 1
    workers: int = 1
    dataset_variant: int = 1
    hidden: tuple = (64,)
    test_requests: int = 200
    forced_kappa: int | None = None
    shared_profile: bool = False
    out_dir: str = "runs"
    dump_streams: bool = False
    catalog: CatalogSection = field(default_factory=CatalogSection)
    devices: DeviceSection = field(default_factory=DeviceSection)
    link: LinkSection = field(default_factory=LinkSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    protocol_params: dict = field(default_factory=dict)

    def __post_init__(self):
        errors = []
        if self.rounds < 1:
            errors.append("rounds must be >= 1")
        if self.clients < 1:
            errors.append("clients must be >= 1")
        if self.trials < 1 or self.workers < 1:
            errors.append("trials and workers must be >= 1")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        if self.dataset_variant not in (1, 2):
            errors.append("dataset_variant must be 1 or 2")
        if self.test_requests < 1:
            errors.append("test_requests must be >= 1")
        unknown = [p for p in self.protocols if p not in PROTOCOLS]
        if unknown or not self.protocols:
            errors.append(f"unknown protocols {unknown}; expected a subset of {list(PROTOCOLS)}")
        if self.catalog.top_k < 1:
            errors.append("catalog.top_k must be >= 1")
        if self.catalog.n_files % self.catalog.n_genres:
            errors.append("catalog.n_files must be divisible by catalog.n_genres")
        for name in ("dataset_size", "arrival_prob", "cycles_per_bit", "energy_budget", "f_max_ghz", "p_max_dbm"):
            lo, hi = getattr(self.devices, name)
            if lo > hi:
                errors.append(f"devices.{name} range is empty ({lo} > {hi})")
        lo, hi = self.catalog.epsilon_range
        if not 0 <= lo <= hi <= 1:
            errors.append("catalog.epsilon_range must satisfy 0 <= lo <= hi <= 1")
        if not (0 <= self.devices.arrival_prob[0] and self.devices.arrival_prob[1] <= 1):
            errors.append("devices.arrival_prob must lie in [0, 1]")
        if self.devices.dataset_size[0] < 1:
            errors.append("devices.dataset_size must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def protocol(self, name: str) -> ProtocolSection:
        return self.protocol_params.get(name, ProtocolSection())


_SECTIONS = {"catalog": CatalogSection, "devices": DeviceSection, "link": LinkSection,
             "optim": OptimConfig, "score": ScoreConfig}


def _build(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    top = dict(data.pop("experiment", {}))
    sections = {}
    for key, cls in _SECTIONS.items():
        sections[key] = _build(cls, data.pop(key, {}), key)
    params = {}
    for name, values in data.pop("protocols", {}).items():
        if name not in PROTOCOLS:
            raise ConfigError(f"unknown protocol section [protocols.{name}]")
        params[name] = _build(ProtocolSection, values, f"protocols.{name}")
    if "output" in data:
        out = data.pop("output")
        unknown = sorted(set(out) - {"dir", "dump_streams"})
        if unknown:
            raise ConfigError(f"unknown key(s) in [output]: {', '.join(unknown)}")
        top.setdefault("out_dir", out.get("dir", "runs"))
        top.setdefault("dump_streams", out.get("dump_streams", False))
    if data:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(data))}")
    if "protocol" in top:
        top["protocols"] = [top.pop("protocol")]
    return _build(ExperimentConfig, {**top, **sections, "protocol_params": params}, "experiment")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return config_from_dict(data)


def preset_names() -> list[str]:
    files = resources.files("osafl").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".toml"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return resources.files("osafl").joinpath("presets", f"{name}.toml").read_text(encoding="utf-8")


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(preset_text(name), f"preset {name}")


# population --------------------------------------------------------------

def sample_bits(cfg: ExperimentConfig) -> int:
    """Bits per stored training sample: 32-bit floats for Dataset-1, label bits for Dataset-2."""
    if cfg.dataset_variant == 1:
        return n_features(cfg) * 32
    return dataset2_sample_bits(cfg.catalog.n_files)


def n_features(cfg: ExperimentConfig) -> int:
    c = cfg.catalog
    if cfg.dataset_variant == 2:
        return c.history
    return dataset1_feature_dim(c.feature_dim, c.n_genres, c.n_files // c.n_genres, c.genre_feature_dim)


def model_spec(cfg: ExperimentConfig) -> core_ml.ModelSpec:
    return core_ml.ModelSpec((n_features(cfg), *cfg.hidden, cfg.catalog.n_files))


def link_config(cfg: ExperimentConfig) -> LinkConfig:
    s = cfg.link
    return LinkConfig(carrier_hz=s.carrier_hz, pl_exponent=s.pl_exponent, shadowing_db=s.shadowing_db,
                      bandwidth=s.bandwidth, noise_dbm_per_hz=s.noise_dbm_per_hz)


def build_catalog(cfg: ExperimentConfig, seed: int) -> ContentCatalog:
    c = cfg.catalog
    return ContentCatalog.generate(c.n_files, c.n_genres, c.feature_dim, c.genre_feature_dim,
                                   c.genre_spread, seeding.keyed_rng(seed, seeding.CATALOG))


def build_population(cfg: ExperimentConfig, seed: int | None = None, stream_log=None):
    """Catalog plus ``U`` clients with full initial datasets; deterministic in the seed.

    ``stream_log`` (a list) receives one record per request drawn.
    """
    seed = cfg.seed if seed is None else seed
    catalog = build_catalog(cfg, seed)
    d = cfg.devices
    c = cfg.catalog
    spec = model_spec(cfg)
    bits = sample_bits(cfg)
    rng = seeding.keyed_rng(seed, seeding.POPULATION)
    distances = uniform_disc(cfg.clients, d.radius_m, rng)
    link_cfg = link_config(cfg)
    shared = None
    clients = []
    for u in range(cfg.clients):
        caps = DeviceCaps(
            cycles_per_bit=rng.uniform(*d.cycles_per_bit),
            sample_bits=bits,
            capacitance=d.capacitance,
            f_max=rng.uniform(*d.f_max_ghz) * 1e9,
            p_max=dbm_to_watt(rng.uniform(*d.p_max_dbm)),
            energy_budget=rng.uniform(*d.energy_budget),
            deadline=d.deadline,
            n_batches=d.n_batches,
            batch_size=d.batch_size,
            n_params=spec.n_params,
            fpp=d.fpp,
        )
        size = int(rng.integers(d.dataset_size[0], d.dataset_size[1] + 1))
        p_u = float(rng.uniform(*d.arrival_prob))
        arrivals = ArrivalConfig(math.ceil(d.arrival_slots * p_u), p_u)
        if shared is None or not cfg.shared_profile:
            profile = UserProfile.sample(c.n_genres, seeding.keyed_rng(seed, seeding.PROFILE, u),
                                         c.dirichlet, c.epsilon_range, c.zipf_gamma, c.zipf_q, c.top_k)
            shared = profile
        else:
            profile = shared
        stream = RequestStream(profile, catalog, cfg.dataset_variant, c.history)
        records = [] if stream_log is not None else None
        initial = stream.generate(size, seeding.keyed_rng(seed, seeding.STREAM, u, 0), records)
        if stream_log is not None:
            stream_log.extend({"round": 0, "user": u, **r} for r in records)
        link = sample_link(float(distances[u]), seeding.keyed_rng(seed, seeding.SHADOWING, u, 0), link_cfg)
        clients.append(ClientState(u, caps, link, FifoBuffer(size, initial), float(distances[u]),
                                   stream, arrivals))
    return catalog, clients


def advance_clients(clients, t: int, seed: int, link_cfg: LinkConfig, stream_log=None):
    """Round-boundary update: arrivals into every FIFO buffer and fresh shadowing."""
    for c in clients:
        if t > 0:
            n = arrivals_this_round(c.arrivals, seeding.keyed_rng(seed, seeding.ARRIVAL, c.uid, t))
            records = [] if stream_log is not None else None
            new = c.stream.generate(n, seeding.keyed_rng(seed, seeding.STREAM, c.uid, t), records)
            c.dataset.update(new)
            if stream_log is not None:
                stream_log.extend({"round": t, "user": c.uid, **r} for r in records)
            c.link = sample_link(c.distance, seeding.keyed_rng(seed, seeding.SHADOWING, c.uid, t), link_cfg)
        c.plan = None


def test_set(clients, t: int, seed: int, n_requests: int):
    parts = [c.stream.peek(n_requests, seeding.keyed_rng(seed, seeding.TEST, c.uid, t)) for c in clients]
    return core_ml.stack_samples([s for part in parts for s in part])


def round_config(cfg: ExperimentConfig, protocol: str, seed: int) -> RoundConfig:
    p = cfg.protocol(protocol)
    return RoundConfig(
        spec=model_spec(cfg), lr=p.lr, global_lr=p.global_lr,
        batch_size=cfg.devices.batch_size if p.batch_size is None else p.batch_size,
        mu=p.mu, disco_a=p.a, disco_b=p.b, score=cfg.score, optim=cfg.optim,
        forced_kappa=cfg.forced_kappa, genie_steps=p.steps, seed=seed, workers=cfg.workers,
    )


# run ---------------------------------------------------------------------

@dataclass
class MetricRow:
    round: int
    protocol: str
    test_accuracy: float
    test_loss: float
    train_loss: float
    straggler_count: int
    mean_kappa: float
    mean_lambda: float


def _train_loss(spec, w, clients, alpha) -> float:
    losses = [core_ml.loss(spec, w, *c.dataset.arrays()) for c in clients]
    return float(np.dot(alpha, losses))


def run(cfg: ExperimentConfig, seed: int | None = None, stream_log=None) -> list[MetricRow]:
    """Simulate ``cfg.rounds`` rounds of every configured protocol for one seed."""
    seed = cfg.seed if seed is None else seed
    _, clients = build_population(cfg, seed, stream_log)
    link_cfg = link_config(cfg)
    spec = model_spec(cfg)
    w0 = core_ml.init_params(spec, seed)
    configs = {p: round_config(cfg, p, seed) for p in cfg.protocols}
    servers = {p: init_server(p, w0, cfg.clients, configs[p].lr) for p in cfg.protocols}
    rows = []
    for t in range(cfg.rounds):
        advance_clients(clients, t, seed, link_cfg, stream_log)
        if cfg.forced_kappa is None:
            for c in clients:
                c.plan = optimize(c.caps, c.link, cfg.optim)
        X_test, y_test = test_set(clients, t, seed, cfg.test_requests)
        for p in cfg.protocols:
            servers[p], report = run_round(p, servers[p], clients, configs[p])
            w = servers[p].w
            if not np.all(np.isfinite(w)):
                log.warning("%s diverged at round %d", p, t)
            rows.append(MetricRow(
                round=t, protocol=p,
                test_accuracy=core_ml.accuracy(spec, w, X_test, y_test),
                test_loss=core_ml.loss(spec, w, X_test, y_test),
                train_loss=_train_loss(spec, w, clients, servers[p].alpha),
                straggler_count=report.straggler_count,
                mean_kappa=report.mean_kappa,
                mean_lambda=report.mean_lambda,
            ))
        log.info("round %d done (%d stragglers)", t, rows[-1].straggler_count)
    return rows


def run_trials(cfg: ExperimentConfig) -> dict[int, list[MetricRow]]:
    """One run per seed ``cfg.seed, cfg.seed + 1, ...``."""
    return {cfg.seed + k: run(cfg, cfg.seed + k) for k in range(cfg.trials)}


# files -------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else repr(value))
    return str(value)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])
    return buf.getvalue()


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def write_metrics(rows, path) -> None:
    _write_text(path, metrics_csv(rows))


def read_metrics(path) -> list[MetricRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricRow(int(r["round"]), r["protocol"], float(r["test_accuracy"]), float(r["test_loss"]),
                          float(r["train_loss"]), int(r["straggler_count"]), float(r["mean_kappa"]),
                          float(r["mean_lambda"])) for r in reader]


def summarize(trials: dict) -> list[dict]:
    """Mean and (population) std across seeds, per round and protocol."""
    groups = {}
    for rows in trials.values():
        for r in rows:
            groups.setdefault((r.round, r.protocol), []).append(r)
    out = []
    for (t, p), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        def stat(name):
            v = np.array([getattr(r, name) for r in rs], dtype=float)
            return float(v.mean()), float(v.std())
        acc, loss_, train = stat("test_accuracy"), stat("test_loss"), stat("train_loss")
        out.append({"round": t, "protocol": p, "n_trials": len(rs),
                    "test_accuracy_mean": acc[0], "test_accuracy_std": acc[1],
                    "test_loss_mean": loss_[0], "test_loss_std": loss_[1],
                    "train_loss_mean": train[0], "train_loss_std": train[1],
                    "straggler_count_mean": stat("straggler_count")[0],
                    "mean_kappa_mean": stat("mean_kappa")[0]})
    return out


def write_summary(summary, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_FIELDS)
    for s in summary:
        writer.writerow([_fmt(s[f]) for f in SUMMARY_FIELDS])
    _write_text(path, buf.getvalue())


def run_to_dir(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run every trial and write ``metrics_seed<k>.csv`` files plus ``summary.csv``."""
    out = Path(out_dir or cfg.out_dir)
    trials = {}
    for k in range(cfg.trials):
        seed = cfg.seed + k
        stream_log = [] if cfg.dump_streams else None
        trials[seed] = run(cfg, seed, stream_log)
        write_metrics(trials[seed], out / f"metrics_seed{seed}.csv")
        if stream_log is not None:
            path = out / f"streams_seed{seed}.jsonl"
            path.unlink(missing_ok=True)
            write_stream_records(stream_log, path)
    write_summary(summarize(trials), out / "summary.csv")
    return out
