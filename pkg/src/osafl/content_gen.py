"""Synthetic video-caching workload.

A catalog of ``F`` files split into ``G`` genres, per-user exploit/explore
request processes, the two training-sample encodings built from a request
stream, and the bounded FIFO dataset each client keeps.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from osafl.core_ml import Sample


def zipf_mandelbrot_pmf(rank: int, gamma: float, q: float, n_files: int) -> float:
    """P(rank) proportional to (rank + q)^-gamma over ranks 1..n_files."""
    if not 1 <= rank <= n_files:
        raise ValueError(f"rank {rank} outside 1..{n_files}")
    return float(zipf_mandelbrot_table(gamma, q, n_files)[rank - 1])


def zipf_mandelbrot_table(gamma: float, q: float, n_files: int) -> np.ndarray:
    """Full pmf over ranks 1..n_files."""
    if n_files < 1:
        raise ValueError("n_files must be >= 1")
    weights = (np.arange(1, n_files + 1, dtype=float) + q) ** (-gamma)
    return weights / weights.sum()


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("degenerate vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


@dataclass
class ContentCatalog:
    n_files: int
    n_genres: int
    file_features: np.ndarray   # (G, files_per_genre, H)
    genre_features: np.ndarray  # (G, H_bar)
    popularity_rank: np.ndarray  # (G, files_per_genre): row g lists file ids, most popular first
    similarity: np.ndarray = field(init=False, repr=False)  # (G, fpg, fpg) cosine table

    def __post_init__(self):
        if self.n_files % self.n_genres:
            raise ValueError(f"F={self.n_files} not divisible by G={self.n_genres}")
        fpg = self.files_per_genre
        if self.file_features.shape[:2] != (self.n_genres, fpg):
            raise ValueError("file_features shape does not match (G, F/G, H)")
        for g in range(self.n_genres):
            if sorted(self.popularity_rank[g]) != list(range(fpg)):
                raise ValueError(f"popularity_rank[{g}] is not a permutation")
        norms = np.linalg.norm(self.file_features, axis=2)
        if np.any(norms == 0):
            raise ValueError("degenerate vector")
        unit = self.file_features / norms[..., None]
        self.similarity = np.clip(np.einsum("gih,gjh->gij", unit, unit), -1.0, 1.0)

    @property
    def files_per_genre(self) -> int:
        return self.n_files // self.n_genres

    def label(self, genre: int, file: int) -> int:
        return genre * self.files_per_genre + file

    @classmethod
    def generate(cls, n_files=100, n_genres=5, feature_dim=64, genre_feature_dim=8,
                 genre_spread=0.5, rng=None) -> "ContentCatalog":
        """Unit-norm file features scattered around a Gaussian centre per genre.

        Genre features are the genre id repeated ``genre_feature_dim`` times.
        """
        rng = np.random.default_rng(rng)
        fpg = n_files // n_genres
        centres = rng.normal(size=(n_genres, 1, feature_dim))
        feats = centres + genre_spread * rng.normal(size=(n_genres, fpg, feature_dim))
        feats /= np.linalg.norm(feats, axis=2, keepdims=True)
        genre_feats = np.repeat(np.arange(n_genres, dtype=float)[:, None],
                                genre_feature_dim, axis=1)
        ranks = np.stack([rng.permutation(fpg) for _ in range(n_genres)])
        return cls(n_files, n_genres, feats, genre_feats, ranks)


@dataclass
class UserProfile:
    genre_prefs: np.ndarray
    epsilon: float
    gamma: float = 1.0
    q: float = 2.0
    top_k: int = 1

    def __post_init__(self):
        self.genre_prefs = np.asarray(self.genre_prefs, dtype=float)
        if abs(self.genre_prefs.sum() - 1.0) > 1e-12 or np.any(self.genre_prefs < 0):
            raise ValueError("genre_prefs must be a probability vector")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.top_k < 1 or self.gamma < 0 or self.q < 0:
            raise ValueError("need top_k >= 1, gamma >= 0, q >= 0")

    @classmethod
    def sample(cls, n_genres, rng, dirichlet=0.3, eps_range=(0.4, 0.9), gamma=1.0, q=2.0, top_k=1):
        prefs = rng.dirichlet(np.full(n_genres, dirichlet))
        # Dirichlet draws with tiny alpha can underflow; renormalise to keep the invariant tight.
        prefs = prefs / prefs.sum()
        return cls(prefs, float(rng.uniform(*eps_range)), gamma, q, top_k)


@dataclass(frozen=True)
class RequestState:
    genre: int
    file: int


def _zipf_file(profile, catalog, genre, rng) -> int:
    pmf = zipf_mandelbrot_table(profile.gamma, profile.q, catalog.files_per_genre)
    rank = rng.choice(catalog.files_per_genre, p=pmf)
    return int(catalog.popularity_rank[genre, rank])


def _explore_genre(profile, current, rng) -> int:
    prefs = profile.genre_prefs
    others = prefs.copy()
    others[current] = 0.0
    if others.sum() <= 0.0:
        # all preference mass on the current genre: no other genre is reachable
        return int(current)
    # direct draw from prefs conditioned on g != current; rejection sampling
    # stalls when nearly all mass sits on the current genre
    return int(rng.choice(prefs.size, p=others / others.sum()))


def first_request(profile, catalog, rng) -> RequestState:
    g = int(rng.choice(catalog.n_genres, p=profile.genre_prefs))
    return RequestState(g, _zipf_file(profile, catalog, g, rng))


def top_k_candidates(catalog, state: RequestState, k: int):
    """Top-k most similar other files in the genre and their renormalised softmax weights."""
    sims = catalog.similarity[state.genre, state.file]
    others = np.array([f for f in range(catalog.files_per_genre) if f != state.file], dtype=int)
    if others.size == 0:
        return np.array([state.file]), np.array([1.0])
    # stable sort on -similarity keeps lower file ids first among ties
    order = np.argsort(-sims[others], kind="stable")[:k]
    chosen = others[order]
    w = np.exp(sims[chosen])
    return chosen, w / w.sum()


def next_request(profile, catalog, state: RequestState, rng) -> RequestState:
    if rng.random() < profile.epsilon:
        files, probs = top_k_candidates(catalog, state, profile.top_k)
        f = int(files[0]) if files.size == 1 else int(rng.choice(files, p=probs))
        return RequestState(state.genre, f)
    g = _explore_genre(profile, state.genre, rng)
    return RequestState(g, _zipf_file(profile, catalog, g, rng))


def raw_features(profile, catalog, state: RequestState) -> np.ndarray:
    """Feature vector of one request (file features, prefs, in-genre cosines, genre features, eps)."""
    return np.concatenate([
        catalog.file_features[state.genre, state.file],
        profile.genre_prefs,
        catalog.similarity[state.genre, state.file],
        catalog.genre_features[state.genre],
        [profile.epsilon],
    ])


def dataset1_feature_dim(feature_dim, n_genres, files_per_genre, genre_feature_dim) -> int:
    return feature_dim + n_genres + files_per_genre + genre_feature_dim + 1


def build_dataset1_sample(prev_features, curr_label: int) -> Sample:
    return Sample(np.asarray(prev_features, dtype=float), int(curr_label))


def build_dataset2_sample(window, next_label: int, L: int = 10) -> Sample:
    window = list(window)
    if len(window) != L:
        raise ValueError(f"window has {len(window)} labels, need {L}")
    return Sample(np.asarray(window, dtype=float), int(next_label))


def dataset1_from_stream(profile, catalog, states) -> list[Sample]:
    states = list(states)
    return [
        build_dataset1_sample(raw_features(profile, catalog, prev), catalog.label(cur.genre, cur.file))
        for prev, cur in zip(states[:-1], states[1:])
    ]


def dataset2_from_stream(labels, L: int = 10) -> list[Sample]:
    labels = list(labels)
    return [build_dataset2_sample(labels[i - L:i], labels[i], L) for i in range(L, len(labels))]


@dataclass
class ArrivalConfig:
    slots: int
    p_arrival: float

    def __post_init__(self):
        if self.slots < 0 or not 0.0 <= self.p_arrival <= 1.0:
            raise ValueError("need slots >= 0 and p_arrival in [0, 1]")


def arrivals_this_round(cfg: ArrivalConfig, rng) -> int:
    return int((rng.random(cfg.slots) < cfg.p_arrival).sum())


class FifoBuffer:
    """Fixed-capacity dataset; admitting new samples evicts the oldest ones."""

    def __init__(self, capacity: int, samples=()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)
        self._cache = None
        self.update(list(samples)[-self.capacity:])

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def samples(self) -> list:
        return list(self._items)

    def update(self, new_samples) -> list:
        """Append ``new_samples``; returns the evicted items, oldest first.

        A batch larger than the capacity keeps only its newest ``capacity`` items.
        """
        new_samples = list(new_samples)
        overflow = max(0, len(self._items) + len(new_samples) - self.capacity)
        evicted = (list(self._items) + new_samples)[:overflow]
        self._items.extend(new_samples)
        if new_samples:
            self._cache = None
        return evicted

    def arrays(self):
        """``(X, y)`` of the current contents; cached until the next update."""
        if self._cache is None:
            X = np.vstack([s.features for s in self._items])
            y = np.fromiter((s.label for s in self._items), dtype=np.int64, count=len(self._items))
            self._cache = (X, y)
        return self._cache


def fifo_update(buffer: FifoBuffer, new_samples) -> FifoBuffer:
    buffer.update(new_samples)
    return buffer


class RequestStream:
    """One user's request process plus the dataset encoding it feeds.

    Holds the last request (and, for Dataset-2, the last ``L`` labels) so a
    continuation can be generated without replaying history.
    """

    def __init__(self, profile, catalog, variant=1, window=10):
        if variant not in (1, 2):
            raise ValueError(f"dataset variant must be 1 or 2, got {variant}")
        self.profile = profile
        self.catalog = catalog
        self.variant = variant
        self.window = window
        self.state = None
        self.history = deque(maxlen=window)

    def _snapshot(self):
        return self.state, deque(self.history, maxlen=self.window)

    def _restore(self, snap):
        self.state, self.history = snap

    def _advance(self, rng):
        if self.state is None:
            self.state = first_request(self.profile, self.catalog, rng)
        else:
            self.state = next_request(self.profile, self.catalog, self.state, rng)
        return self.state

    def generate(self, n_samples: int, rng, log=None) -> list[Sample]:
        """Draw requests until ``n_samples`` training samples have been emitted."""
        out = []
        while len(out) < n_samples:
            prev = self.state
            cur = self._advance(rng)
            label = self.catalog.label(cur.genre, cur.file)
            if log is not None:
                log.append({"genre": cur.genre, "file": cur.file, "label": label})
            if self.variant == 1:
                if prev is not None:
                    out.append(build_dataset1_sample(
                        raw_features(self.profile, self.catalog, prev), label))
            else:
                if len(self.history) == self.window:
                    out.append(build_dataset2_sample(self.history, label, self.window))
                self.history.append(label)
        return out

    def peek(self, n_samples: int, rng) -> list[Sample]:
        """Samples from a continuation of the stream, leaving the stream untouched."""
        snap = self._snapshot()
        try:
            return self.generate(n_samples, rng)
        finally:
            self._restore(snap)


def write_stream_records(records, path) -> None:
    """Append request records as line-delimited JSON."""
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def dataset2_sample_bits(n_files: int) -> int:
    return max(1, math.ceil(math.log2(n_files)))
