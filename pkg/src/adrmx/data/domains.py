"""Multi-domain datasets, train/val splits and the composite batch sampler."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

from ..errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class DomainDataset:
    domain_id: int
    domain_name: str
    inputs: np.ndarray  # (N, d_in) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    # position of each row in the domain it was split from
    index: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ConfigError(f"domain {self.domain_name!r}: inputs must be (N, d_in), got {self.inputs.shape}")
        n = self.inputs.shape[0]
        if n < 1:
            raise ConfigError(f"domain {self.domain_name!r} is empty")
        if self.labels.shape != (n,):
            raise ConfigError(f"domain {self.domain_name!r}: {n} inputs but labels of shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"domain {self.domain_name!r}: labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError(f"domain {self.domain_name!r}: non-finite inputs")
        if self.index is None:
            self.index = np.arange(n, dtype=np.int64)
        else:
            self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows: np.ndarray) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, inputs=self.inputs[rows], labels=self.labels[rows], index=self.index[rows])


@dataclass
class MultiDomainTask:
    domains: list[DomainDataset]
    target_index: int | None = None
    name: str = "task"

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids {ids}")
        n_sources = len(self.domains) - (0 if self.target_index is None else 1)
        if n_sources < 2:
            raise ConfigError("a task needs at least 2 source domains")
        if len({d.d_in for d in self.domains}) != 1 or len({d.num_classes for d in self.domains}) != 1:
            raise ConfigError("all domains must share d_in and num_classes")
        if self.target_index is not None and not 0 <= self.target_index < len(self.domains):
            raise ConfigError(f"target_index {self.target_index} out of range")

    @property
    def num_classes(self) -> int:
        return self.domains[0].num_classes

    @property
    def d_in(self) -> int:
        return self.domains[0].d_in

    def with_target(self, target_index: int) -> "MultiDomainTask":
        return MultiDomainTask(self.domains, target_index, self.name)

    @property
    def sources(self) -> list[DomainDataset]:
        return [d for i, d in enumerate(self.domains) if i != self.target_index]

    @property
    def target(self) -> DomainDataset | None:
        return None if self.target_index is None else self.domains[self.target_index]


@dataclass(frozen=True)
class SplitSpec:
    holdout_fraction: float = 0.2
    seed: int = 0


def _positive(**kw) -> None:
    for k, v in kw.items():
        if v <= 0:
            raise ConfigError(f"{k} must be positive, got {v}")


def _class_means(num_classes: int, d_in: int, class_sep: float, rng: np.random.Generator) -> np.ndarray:
    if num_classes == 2:
        u = rng.standard_normal(d_in)
        u /= np.linalg.norm(u)
        return np.stack([-0.5 * class_sep * u, 0.5 * class_sep * u])
    if d_in >= num_classes:
        # orthogonal frame: every pair of means is class_sep apart
        q, _ = np.linalg.qr(rng.standard_normal((d_in, num_classes)))
        return (class_sep / math.sqrt(2.0)) * q.T
    return class_sep * rng.standard_normal((num_classes, d_in))


def gen_gaussian_domains(num_domains: int = 4, per_domain_n: int = 500, num_classes: int = 2,
                         d_in: int = 8, domain_shift_scale: float = 1.0, seed: int = 0,
                         class_sep: float = 4.0, rotation_scale: float = 0.5) -> MultiDomainTask:
    """Class-conditional unit Gaussians with a per-domain rotation and translation.

    Class means are shared by all domains (``class_sep`` apart in units of
    the noise std). Domain ``k`` maps every point ``x -> R_k x + t_k`` where
    ``R_k = expm(shift * rotation_scale * K_k)`` for a random skew-symmetric
    ``K_k`` and ``|t_k| = shift``. With ``domain_shift_scale = 0`` every
    domain is the same distribution.
    """
    if num_domains < 3:
        raise ConfigError(f"num_domains must be >= 3, got {num_domains}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    _positive(per_domain_n=per_domain_n, d_in=d_in)
    if domain_shift_scale < 0:
        raise ConfigError(f"domain_shift_scale must be >= 0, got {domain_shift_scale}")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, d_in, class_sep, rng)
    domains = []
    for k in range(num_domains):
        g = rng.standard_normal((d_in, d_in))
        skew = (g - g.T) / 2.0
        rot = expm(domain_shift_scale * rotation_scale * skew)
        t = rng.standard_normal(d_in)
        t *= domain_shift_scale / np.linalg.norm(t)
        labels = np.arange(per_domain_n) % num_classes
        rng.shuffle(labels)
        base = means[labels] + rng.standard_normal((per_domain_n, d_in))
        x = base @ rot.T + t
        domains.append(DomainDataset(k, f"gauss{k}", x, labels, num_classes))
    return MultiDomainTask(domains, name="gaussian")


def _validate_base(base_images: np.ndarray, base_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(base_images, dtype=np.float64)
    labels = np.asarray(base_labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ConfigError("base image set is empty")
    if images.ndim == 2:
        side = int(round(math.sqrt(images.shape[1])))
        images = images.reshape(-1, side, side)
    if images.shape[0] != labels.shape[0]:
        raise ConfigError(f"{images.shape[0]} base images but {labels.shape[0]} labels")
    return images, labels


def _domain_rows(n_base: int, num_domains: int, per_domain: int | None,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Base-image rows for each domain.

    Without ``per_domain`` the shuffled base set is split into near-equal
    disjoint chunks. With it, domain ``k`` takes ``per_domain`` consecutive
    positions starting at ``k * per_domain`` of the shuffled order, wrapping
    around when the base set is too small; domains are disjoint whenever
    ``num_domains * per_domain <= n_base``.
    """
    perm = rng.permutation(n_base)
    if per_domain is None:
        return [np.sort(c) for c in np.array_split(perm, num_domains)]
    _positive(subset_per_domain=per_domain)
    if num_domains * per_domain > n_base:
        logger.warning("base set of %d images is smaller than %d domains x %d; domain subsets wrap around",
                       n_base, num_domains, per_domain)
    return [perm[(k * per_domain + np.arange(per_domain)) % n_base] for k in range(num_domains)]


def make_colored_mnist(base_images, base_labels, seed: int = 0, label_noise: float = 0.25,
                       correlations: Sequence[float] = (0.9, 0.8, -0.9),
                       samples_per_domain: int | None = None) -> MultiDomainTask:
    """Two-channel colored digits with a per-domain color/label correlation.

    Positive correlation ``c``: the color index equals the noisy binary label
    with probability ``c``. Negative ``c``: it differs with probability ``|c|``.
    The channel that does not match the color is zeroed.
    """
    images, digits = _validate_base(base_images, base_labels)
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigError(f"label_noise must be in [0, 1], got {label_noise}")
    if len(correlations) < 2:
        raise ConfigError("need at least 2 domains")
    rng = np.random.default_rng(seed)
    rows_per_domain = _domain_rows(len(digits), len(correlations), samples_per_domain, rng)
    domains = []
    for k, (corr, rows) in enumerate(zip(correlations, rows_per_domain)):
        if not -1.0 <= corr <= 1.0:
            raise ConfigError(f"correlation must be in [-1, 1], got {corr}")
        label = (digits[rows] >= 5).astype(np.int64)
        label ^= (rng.random(rows.size) < label_noise).astype(np.int64)
        if corr >= 0:
            agree = rng.random(rows.size) < corr
        else:
            agree = rng.random(rows.size) >= -corr
        color = np.where(agree, label, 1 - label)
        img = images[rows]
        two = np.zeros((rows.size, 2) + img.shape[1:])
        two[np.arange(rows.size), color] = img
        domains.append(DomainDataset(k, f"{corr:+.0%}", two.reshape(rows.size, -1), label, 2))
    return MultiDomainTask(domains, name="colored_mnist")


def color_of(ds: DomainDataset) -> np.ndarray:
    """Recover the color index of each two-channel image (the non-zero channel)."""
    half = ds.d_in // 2
    return (ds.inputs[:, half:].sum(axis=1) > ds.inputs[:, :half].sum(axis=1)).astype(np.int64)


def color_label_correlation(ds: DomainDataset, sign: float = 1.0) -> float:
    """Signed color/label agreement in the convention of ``make_colored_mnist``."""
    agree = float(np.mean(color_of(ds) == ds.labels))
    return agree if sign >= 0 else -(1.0 - agree)


def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate (N, H, W) images counter-clockwise about their centers.

    Bilinear interpolation, zero outside the source image.
    """
    images = np.asarray(images, dtype=np.float64)
    if angle_deg == 0:
        return images.copy()
    n, h, w = images.shape
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source coordinate
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(images)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ys, xs = y0 + oy, x0 + ox
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        vals = np.zeros_like(images)
        vals[:, ok] = images[:, ys[ok], xs[ok]]
        out += vals * wgt
    return out


def make_rotated_mnist(base_images, base_labels, angles: Sequence[float] = (0, 15, 30, 45, 60, 75),
                       subset_per_domain: int | None = None, seed: int = 0) -> MultiDomainTask:
    images, digits = _validate_base(base_images, base_labels)
    if len(set(angles)) != len(angles):
        raise ConfigError(f"angles must be distinct, got {list(angles)}")
    for a in angles:
        if not 0 <= a <= 90:
            logger.warning("rotation angle %s is outside [0, 90] degrees", a)
    rng = np.random.default_rng(seed)
    rows_per_domain = _domain_rows(len(digits), len(angles), subset_per_domain, rng)
    domains = []
    for k, (angle, rows) in enumerate(zip(angles, rows_per_domain)):
        rotated = rotate_images(images[rows], angle)
        domains.append(DomainDataset(k, f"{angle:g}deg", rotated.reshape(rows.size, -1), digits[rows], 10,
                                     index=rows))
    return MultiDomainTask(domains, name="rotated_mnist")


def split_train_val(ds: DomainDataset, spec: SplitSpec) -> tuple[DomainDataset, DomainDataset]:
    """Class-stratified random split; the validation part gets round(N * f) rows."""
    f = spec.holdout_fraction
    if not 0.0 < f < 1.0:
        raise ConfigError(f"holdout_fraction must be in (0, 1), got {f}")
    n = len(ds)
    n_val = int(round(n * f))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"holdout_fraction {f} leaves an empty part for {n} samples")
    rng = np.random.default_rng(spec.seed)
    classes = np.unique(ds.labels)
    members = {c: rng.permutation(np.flatnonzero(ds.labels == c)) for c in classes}
    quota = {c: members[c].size * f for c in classes}
    take = {c: int(math.floor(quota[c])) for c in classes}
    # largest remainder so that the counts sum to n_val
    order = sorted(classes, key=lambda c: (-(quota[c] - take[c]), c))
    for c in order[: n_val - sum(take.values())]:
        take[c] += 1
    val_rows = np.sort(np.concatenate([members[c][: take[c]] for c in classes]))
    train_rows = np.setdiff1d(np.arange(n), val_rows)
    return ds.subset(train_rows), ds.subset(val_rows)


@dataclass
class CompositeBatch:
    inputs: np.ndarray
    labels: np.ndarray
    domains: np.ndarray  # position of the source domain, 0..S-1
    domain_ids: np.ndarray  # the domains' own ids
    rows: list[np.ndarray] = field(default_factory=list)  # per-source row indices

    def __len__(self) -> int:
        return self.labels.shape[0]


class BatchSampler:
    """Endless stream of composite batches, ``batch_per_domain`` rows from every source.

    Each source walks its own permutation; when fewer than ``batch_per_domain``
    rows remain the leftovers are dropped and the source is reshuffled.
    """

    def __init__(self, sources: Sequence[DomainDataset], batch_per_domain: int, seed: int = 0):
        if not sources:
            raise ConfigError("batch sampler needs at least one source")
        _positive(batch_per_domain=batch_per_domain)
        for s in sources:
            if batch_per_domain > len(s):
                raise ConfigError(f"batch_per_domain {batch_per_domain} exceeds size {len(s)} "
                                  f"of domain {s.domain_name!r}")
        self.sources = list(sources)
        self.batch_per_domain = batch_per_domain
        self.rng = np.random.default_rng(seed)
        self._perm = [self.rng.permutation(len(s)) for s in self.sources]
        self._pos = [0] * len(self.sources)
        self.epochs = [0] * len(self.sources)

    def _take(self, k: int) -> np.ndarray:
        b = self.batch_per_domain
        if self._pos[k] + b > self._perm[k].size:
            self._perm[k] = self.rng.permutation(len(self.sources[k]))
            self._pos[k] = 0
            self.epochs[k] += 1
        rows = self._perm[k][self._pos[k]: self._pos[k] + b]
        self._pos[k] += b
        return rows

    def next(self) -> CompositeBatch:
        rows = [self._take(k) for k in range(len(self.sources))]
        b = self.batch_per_domain
        return CompositeBatch(
            inputs=np.concatenate([s.inputs[r] for s, r in zip(self.sources, rows)]),
            labels=np.concatenate([s.labels[r] for s, r in zip(self.sources, rows)]),
            domains=np.repeat(np.arange(len(self.sources)), b),
            domain_ids=np.repeat([s.domain_id for s in self.sources], b),
            rows=rows,
        )

    def __iter__(self) -> Iterator[CompositeBatch]:
        while True:
            yield self.next()


def batch_sampler(sources: Sequence[DomainDataset], batch_per_domain: int, seed: int = 0) -> Iterator[CompositeBatch]:
    return iter(BatchSampler(sources, batch_per_domain, seed))
