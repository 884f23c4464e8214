"""Synthetic hypersphere mixtures, vector augmentations, and CSV I/O.

A dataset is a feature matrix with optional integer class labels and stable
integer ids. The generator draws one vMF component per class around mean
directions kept pairwise separated (|cos| < 0.5); the long-tail transform
subsamples classes down an exponential count profile.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import VMFParams, vmf_sample

__all__ = [
    "Dataset", "SyntheticSpec", "AugmentSpec",
    "gen_vmf_mixture", "make_long_tailed", "augment",
    "load_csv", "save_csv",
]

SEPARATION_COS = 0.5
_MAX_MEAN_ATTEMPTS = 1000


@dataclass
class Dataset:
    features: np.ndarray            # n x d float64
    labels: np.ndarray | None       # n ints, or None when unlabeled
    ids: np.ndarray                 # n ints, stable across transforms of a run

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        n = self.features.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels must align with feature rows")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise ValueError("ids must align with feature rows")

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """vMF mixture layout: per-class concentration and count may be shared
    scalars or per-class lists."""
    num_classes: int
    ambient_dim: int
    kappa: float | tuple = 50.0
    per_class: int | tuple = 250
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.ambient_dim < 2:
            raise ValueError("ambient_dim must be >= 2")
        object.__setattr__(self, "kappa", self._broadcast(self.kappa, float, "kappa"))
        object.__setattr__(self, "per_class", self._broadcast(self.per_class, int, "per_class"))
        if any(k < 0 for k in self.kappa):
            raise ValueError("kappa must be >= 0")
        if any(c < 1 for c in self.per_class):
            raise ValueError("per_class counts must be >= 1")

    def _broadcast(self, value, cast, name):
        if np.isscalar(value):
            return tuple([cast(value)] * self.num_classes)
        out = tuple(cast(v) for v in value)
        if len(out) != self.num_classes:
            raise ValueError(f"{name} must be a scalar or one entry per class")
        return out


@dataclass(frozen=True)
class AugmentSpec:
    """Additive Gaussian noise, independent coordinate masking, and a global
    per-sample scale drawn uniformly from scale_range."""
    noise_std: float = 0.1
    mask_prob: float = 0.2
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in [0, 1)")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))


def _draw_separated_means(k, d, rng):
    """Uniform directions, redrawing each until it clears every accepted one."""
    mu = np.empty((k, d))
    for c in range(k):
        for _ in range(_MAX_MEAN_ATTEMPTS):
            g = rng.standard_normal(d)
            cand = g / np.linalg.norm(g)
            if c == 0 or np.abs(mu[:c] @ cand).max() < SEPARATION_COS:
                mu[c] = cand
                break
        else:
            raise ValueError(
                f"could not draw {k} mean directions with pairwise |cos| < "
                f"{SEPARATION_COS} in dimension {d}: class {c} failed after "
                f"{_MAX_MEAN_ATTEMPTS} attempts")
    return mu


def gen_vmf_mixture(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Returns (dataset, true mean directions). Rows are grouped by class."""
    rng = np.random.default_rng(spec.seed)
    means = _draw_separated_means(spec.num_classes, spec.ambient_dim, rng)
    blocks, labels = [], []
    for c in range(spec.num_classes):
        params = VMFParams(mu=means[c], kappa=spec.kappa[c])
        blocks.append(vmf_sample(params, spec.per_class[c], rng))
        labels.extend([c] * spec.per_class[c])
    features = np.vstack(blocks)
    n = features.shape[0]
    return Dataset(features=features, labels=np.array(labels), ids=np.arange(n)), means


def make_long_tailed(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Subsample classes down an exponential profile from the largest class
    count to ratio times it (rounded, at least 1 per class)."""
    if ds.labels is None:
        raise ValueError("long-tail subsampling needs class labels")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    classes = np.unique(ds.labels)
    k = len(classes)
    n_max = max(int((ds.labels == c).sum()) for c in classes)
    rng = np.random.default_rng(seed)
    keep = []
    for rank, c in enumerate(classes):
        if k == 1:
            target = n_max
        else:
            target = int(round(n_max * ratio ** (rank / (k - 1))))
        target = max(target, 1)
        members = np.flatnonzero(ds.labels == c)
        target = min(target, members.size)
        chosen = rng.choice(members, size=target, replace=False)
        keep.append(np.sort(chosen))
    keep = np.concatenate(keep)
    keep.sort()
    return Dataset(features=ds.features[keep], labels=ds.labels[keep],
                   ids=np.arange(keep.size))


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view per row; draw order is noise, mask, scale."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("augment expects an n x d matrix")
    out = x + spec.noise_std * rng.standard_normal(x.shape)
    out = out * (rng.random(x.shape) >= spec.mask_prob)
    lo, hi = spec.scale_range
    out = out * rng.uniform(lo, hi, size=(x.shape[0], 1))
    return out


def save_csv(path, ds: Dataset) -> None:
    """Header is label,f0..f{d-1} when labeled, else f0..f{d-1}. Values are
    written with enough digits to round-trip float64 exactly."""
    d = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = [f"f{j}" for j in range(d)]
        if ds.labels is not None:
            writer.writerow(["label"] + cols)
            for lab, row in zip(ds.labels, ds.features):
                writer.writerow([int(lab)] + [f"{v:.17g}" for v in row])
        else:
            writer.writerow(cols)
            for row in ds.features:
                writer.writerow([f"{v:.17g}" for v in row])


def _parse_header(header):
    if not header:
        raise ValueError("line 1: empty header")
    labeled = header[0] == "label"
    feats = header[1:] if labeled else header
    want = [f"f{j}" for j in range(len(feats))]
    if not feats or feats != want:
        raise ValueError(f"line 1: header must be {'label,' if labeled else ''}f0,...,f{{d-1}}")
    return labeled, len(feats)


def load_csv(path) -> Dataset:
    """Strict reader for the formats written by save_csv; malformed input
    fails with the 1-based line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        labeled, d = _parse_header(header)
        width = d + 1 if labeled else d
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(f"line {lineno}: expected {width} cells, found {len(row)}")
            try:
                if labeled:
                    labels.append(int(row[0]))
                    rows.append([float(v) for v in row[1:]])
                else:
                    rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric cell") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.array(rows)
    return Dataset(features=features,
                   labels=np.array(labels) if labeled else None,
                   ids=np.arange(features.shape[0]))
