"""Synthetic client populations with class/size imbalance and data-quality noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError, ContractError
from .nn_core import Batch

NOISE_KINDS = ("clean", "irrelevant", "blur", "salt_pepper", "polluted", "gaussian")

NOISE_DEFAULTS = {
    "clean": {},
    "irrelevant": {},
    "blur": {"sigma": 2.0},
    "salt_pepper": {"density": 0.3},
    "polluted": {"fraction": 0.1, "sentinel": 1e3},
    "gaussian": {"sigma": 0.5},
}


@dataclass(frozen=True)
class SizeLaw:
    """Per-client sample counts ~ N(mean, std^2), clipped below at ``min``."""

    mean: float = 514.0
    std: float = 101.0
    min: int = 64


@dataclass(frozen=True)
class PopulationConfig:
    n_clients: int = 50
    n_classes: int = 10
    feature_dim: int = 16
    size_law: Optional[SizeLaw] = field(default_factory=SizeLaw)
    # pool mode: a fixed pool of ``total_samples`` partitioned across clients
    total_samples: Optional[int] = None
    dominant_class_fraction: Optional[float] = 0.6
    validation_size: int = 2000
    seed: int = 0

    def validate(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be positive", "population.n_clients")
        if self.n_classes == 1 or self.n_classes < 0:
            raise ConfigError("n_classes must be >= 2, or 0 for regression", "population.n_classes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive", "population.feature_dim")
        if self.validation_size < 1:
            raise ConfigError("validation_size must be positive", "population.validation_size")
        dc = self.dominant_class_fraction
        if self.n_classes >= 2 and dc is not None and not (1.0 / self.n_classes < dc <= 1.0):
            raise ConfigError(
                f"dominant_class_fraction must lie in (1/{self.n_classes}, 1], got {dc}",
                "population.dominant_class_fraction",
            )
        if self.size_law is None and self.total_samples is None:
            raise ConfigError("either size_law or total_samples is required", "population")
        if self.size_law is not None and self.size_law.min < 1:
            raise ConfigError("size_law.min must be positive", "population.size_law.min")


@dataclass(frozen=True)
class LocalDataset:
    features: np.ndarray
    targets: np.ndarray
    kind: str = "clean"
    client_id: int = -1

    def __len__(self):
        return self.features.shape[0]

    def as_batch(self) -> Batch:
        return Batch(self.features, self.targets)


def _simplex_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors of a randomly rotated regular simplex (needs dim >= n - 1)."""
    centred = np.eye(n) - 1.0 / n
    u, _, _ = np.linalg.svd(centred)
    coords = centred @ u[:, : n - 1]
    q, _ = np.linalg.qr(rng.normal(size=(dim, n - 1)))
    dirs = coords @ q.T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


class ClassMixture:
    """Gaussian blobs, one per class, unit covariance.

    Class offsets have norm ``mean_norm`` and are placed on a randomly rotated
    regular simplex when ``feature_dim >= n_classes - 1`` (random directions
    otherwise). All classes share a common centre of ``offset`` per feature, so
    task data is not centred at the origin.
    """

    def __init__(self, n_classes: int, feature_dim: int, seed: int, mean_norm: float = 3.0,
                 means: Optional[np.ndarray] = None, offset: float = 1.0):
        if n_classes < 2:
            raise ConfigError("a class mixture needs at least two classes")
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        if means is None:
            rng = np.random.default_rng([seed, 0xC1A55])
            if feature_dim >= n_classes - 1:
                dirs = _simplex_directions(n_classes, feature_dim, rng)
            else:
                raw = rng.normal(size=(n_classes, feature_dim))
                dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
            means = mean_norm * dirs + offset
        self.means = np.asarray(means, dtype=float)

    def sample_class(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.means[label] + rng.normal(size=(n, self.feature_dim))

    def sample_labels(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        return self.means[labels] + rng.normal(size=(labels.size, self.feature_dim))

    def sample(self, n: int, rng: np.random.Generator):
        labels = rng.integers(0, self.n_classes, size=n)
        return self.sample_labels(labels, rng), labels


def class_mixture_source(n_classes: int, feature_dim: int, seed: int) -> ClassMixture:
    return ClassMixture(n_classes, feature_dim, seed)


class RegressionSource:
    """Inputs ~ N(0, I); target = tanh teacher of a random linear map plus small noise."""

    def __init__(self, feature_dim: int, seed: int, n_targets: int = 1, noise: float = 0.1):
        rng = np.random.default_rng([seed, 0x7EAC4])
        self.feature_dim = feature_dim
        self.w = rng.normal(size=(feature_dim, n_targets)) / math.sqrt(feature_dim)
        self.noise = noise

    def sample(self, n: int, rng: np.random.Generator):
        x = rng.normal(size=(n, self.feature_dim))
        y = np.tanh(x @ self.w) * 2.0 + self.noise * rng.normal(size=(n, self.w.shape[1]))
        return x, y


def _dominant_labels(n: int, dominant: int, n_classes: int, dc: float,
                     rng: np.random.Generator) -> np.ndarray:
    n_dom = int(round(dc * n))
    others = np.array([c for c in range(n_classes) if c != dominant])
    rest = others[rng.integers(0, others.size, size=n - n_dom)] if others.size else \
        np.full(n - n_dom, dominant)
    labels = np.concatenate([np.full(n_dom, dominant), rest])
    return rng.permutation(labels)


def client_sizes(law: SizeLaw, n_clients: int, rng: np.random.Generator) -> np.ndarray:
    sizes = np.rint(rng.normal(law.mean, law.std, size=n_clients)).astype(int)
    return np.maximum(sizes, law.min)


def assign_noise(n_clients: int, noise: Sequence, rng: np.random.Generator) -> list[tuple[str, dict]]:
    """Map every client to a noise kind. ``noise`` holds ``(kind, fraction, params)`` triples.

    Each kind gets ``round(fraction * n_clients)`` clients; the rest are clean.
    """
    counts, total_frac = [], 0.0
    for kind, frac, params in noise:
        if kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {kind!r}", "noise.kind")
        if frac < 0:
            raise ConfigError(f"negative fraction for {kind}", "noise.fraction")
        total_frac += frac
        counts.append((kind, int(round(frac * n_clients)), {**NOISE_DEFAULTS[kind], **(params or {})}))
    if total_frac > 1.0 + 1e-12:
        raise ConfigError(f"noise fractions sum to {total_frac} > 1", "noise")
    if sum(c for _, c, _ in counts) > n_clients:
        raise ConfigError("noise counts exceed the population after rounding", "noise")
    assignment: list[tuple[str, dict]] = []
    for kind, count, params in counts:
        assignment.extend([(kind, params)] * count)
    assignment.extend([("clean", {})] * (n_clients - len(assignment)))
    order = rng.permutation(n_clients)
    return [assignment[i] for i in order]


def apply_noise(ds: LocalDataset, kind: str, params: Optional[dict], seed) -> LocalDataset:
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}")
    p = {**NOISE_DEFAULTS[kind], **(params or {})}
    rng = np.random.default_rng(seed)
    x = np.array(ds.features, dtype=float, copy=True)
    y = ds.targets
    if kind == "irrelevant":
        x = rng.normal(size=x.shape)
        if np.issubdtype(np.asarray(y).dtype, np.integer):
            n_classes = int(p.get("n_classes", int(np.max(y)) + 1))
            y = rng.integers(0, max(n_classes, 2), size=len(y))
        else:
            y = rng.normal(size=np.shape(y))
    elif kind == "blur":
        if p["sigma"] < 0:
            raise ConfigError("blur sigma must be non-negative")
        if p["sigma"] > 0:
            x = gaussian_filter1d(x, sigma=p["sigma"], axis=1, mode="nearest")
    elif kind == "salt_pepper":
        density = p["density"]
        if not 0.0 <= density <= 1.0:
            raise ConfigError(f"salt_pepper density must lie in [0, 1], got {density}")
        lo, hi = x.min(), x.max()
        hit = rng.random(x.shape) < density
        salt = rng.random(x.shape) < 0.5
        x = np.where(hit, np.where(salt, hi, lo), x)
    elif kind == "polluted":
        hit = rng.random(x.shape) < p["fraction"]
        x = np.where(hit, p["sentinel"], x)
    elif kind == "gaussian":
        if p["sigma"] < 0:
            raise ConfigError("gaussian sigma must be non-negative")
        x = x + rng.normal(0.0, p["sigma"], size=x.shape)
    return replace(ds, features=x, targets=y, kind=kind)


def partition_pool(labels: np.ndarray, sizes: Sequence[int], dominant: Sequence[int],
                   dc: Optional[float], rng: np.random.Generator) -> list[np.ndarray]:
    """Split pool indices into disjoint client index sets.

    Each client takes ``round(dc * size)`` samples of its dominant class and the
    remainder uniformly from the other classes still available.
    """
    labels = np.asarray(labels, dtype=int)
    if sum(sizes) > labels.size:
        raise ConfigError("client sizes exceed the pool")
    available = np.ones(labels.size, dtype=bool)
    order = rng.permutation(labels.size)
    parts = []
    for size, dom in zip(sizes, dominant):
        if dc is None:
            pick = order[available[order]][:size]
        else:
            n_dom = int(round(dc * size))
            dom_idx = order[available[order] & (labels[order] == dom)]
            if dom_idx.size < n_dom:
                raise ConfigError(
                    f"infeasible dominant_class_fraction: class {dom} has {dom_idx.size} "
                    f"samples left, {n_dom} needed",
                    "population.dominant_class_fraction",
                )
            other_idx = order[available[order] & (labels[order] != dom)]
            if other_idx.size < size - n_dom:
                raise ConfigError(
                    "infeasible dominant_class_fraction: not enough non-dominant samples",
                    "population.dominant_class_fraction",
                )
            pick = np.concatenate([dom_idx[:n_dom], other_idx[: size - n_dom]])
        available[pick] = False
        parts.append(np.sort(pick))
    return parts


def _pool_sizes(total: int, n_clients: int, law: Optional[SizeLaw], rng) -> np.ndarray:
    if law is None:
        base = np.full(n_clients, total // n_clients)
        base[: total - base.sum()] += 1
        return base
    raw = client_sizes(law, n_clients, rng).astype(float)
    sizes = np.floor(raw / raw.sum() * total).astype(int)
    sizes[: total - sizes.sum()] += 1
    return sizes


def make_population(cfg: PopulationConfig, noise: Sequence = ()):
    """Build ``(clients, validation)`` for ``cfg`` under the ``noise`` assignment."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    classification = cfg.n_classes >= 2
    if classification:
        source = ClassMixture(cfg.n_classes, cfg.feature_dim, cfg.seed)
    else:
        source = RegressionSource(cfg.feature_dim, cfg.seed)
    dominant = rng.permutation(np.arange(cfg.n_clients) % max(cfg.n_classes, 1))
    dc = cfg.dominant_class_fraction if classification else None

    if cfg.total_samples is not None:
        pool_x, pool_y = source.sample(cfg.total_samples + cfg.validation_size, rng)
        perm = rng.permutation(pool_x.shape[0])
        val_idx, rest = np.sort(perm[: cfg.validation_size]), perm[cfg.validation_size:]
        sizes = _pool_sizes(cfg.total_samples, cfg.n_clients, cfg.size_law, rng)
        rest_labels = pool_y[rest] if classification else np.zeros(rest.size, dtype=int)
        parts = partition_pool(rest_labels, sizes, dominant, dc, rng)
        raw = [(pool_x[rest[p]], pool_y[rest[p]]) for p in parts]
        validation = LocalDataset(pool_x[val_idx], pool_y[val_idx], "clean", -1)
    else:
        sizes = client_sizes(cfg.size_law, cfg.n_clients, rng)
        raw = []
        for k, n in enumerate(sizes):
            if classification:
                labels = _dominant_labels(int(n), int(dominant[k]), cfg.n_classes, dc, rng) \
                    if dc is not None else rng.integers(0, cfg.n_classes, size=int(n))
                raw.append((source.sample_labels(labels, rng), labels))
            else:
                raw.append(source.sample(int(n), rng))
        vx, vy = source.sample(cfg.validation_size, rng)
        validation = LocalDataset(vx, vy, "clean", -1)

    kinds = assign_noise(cfg.n_clients, noise, rng)
    clients = []
    for k, ((x, y), (kind, params)) in enumerate(zip(raw, kinds)):
        ds = LocalDataset(x, y, "clean", k)
        if kind != "clean":
            if classification:
                params = {"n_classes": cfg.n_classes, **params}
            ds = apply_noise(ds, kind, params, [cfg.seed, 0x501, k])
        clients.append(replace(ds, client_id=k))
    return clients, validation


def load_csv(path, classification: bool = True) -> LocalDataset:
    """Read a UTF-8 comma-separated file with a header row; last column is the target."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ContractError(f"{path} is empty")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ContractError(f"{path} has a header but no data rows")
    data = np.asarray(rows, dtype=float)
    if data.shape[1] < 2:
        raise ContractError("need at least one feature column and one target column")
    x, y = data[:, :-1], data[:, -1]
    if classification:
        if not np.all(y == np.round(y)):
            raise ContractError("classification targets must be integers")
        y = y.astype(int)
    else:
        y = y.reshape(-1, 1)
    return LocalDataset(x, y, "clean", -1)


def save_population(path, clients: Sequence[LocalDataset], validation: LocalDataset):
    """Store datasets and their provenance labels in one ``.npz`` archive."""
    arrays = {"val_x": validation.features, "val_y": validation.targets}
    for ds in clients:
        arrays[f"x_{ds.client_id}"] = ds.features
        arrays[f"y_{ds.client_id}"] = ds.targets
    arrays["ids"] = np.array([ds.client_id for ds in clients])
    arrays["kinds"] = np.array([ds.kind for ds in clients])
    np.savez_compressed(path, **arrays)


def load_population(path):
    with np.load(path, allow_pickle=False) as z:
        clients = [
            LocalDataset(z[f"x_{cid}"], z[f"y_{cid}"], str(kind), int(cid))
            for cid, kind in zip(z["ids"], z["kinds"])
        ]
        validation = LocalDataset(z["val_x"], z["val_y"], "clean", -1)
    return clients, validation
