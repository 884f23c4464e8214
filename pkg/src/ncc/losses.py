"""Training objectives.

The main loss is symmetric over the two views: each pass sends one view
through the online encoder and the other through the target encoder,
aligns the predicted noisy positive with the target embedding, and adds a
prototype contrastive term computed from mini-batch cluster centers under
the current pseudo-labels. Empty clusters (possible whenever the batch
misses a cluster, in particular when k exceeds the batch size) contribute
exactly zero loss and zero gradient: their center rows stay at zero, their
columns enter the uniformity logits as a large negative fill, and their
rows are masked out of the average over non-empty clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import NetworkPair, forward_online, forward_target, predict

__all__ = [
    "LossConfig", "PseudoLabels", "Prototypes",
    "infonce_loss", "byol_align_loss", "sample_positive", "aug_instance_loss",
    "compute_centers", "protocl_loss", "ncc_loss", "byol_loss",
    "simclr_infonce_loss", "nll_instance_to_prototype",
]

EMPTY_FILL = -10.0  # logit placeholder for empty-cluster columns


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    sigma: float = 0.001
    lambda_pcl: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lambda_pcl < 0:
            raise ValueError("lambda_pcl must be >= 0")


@dataclass
class PseudoLabels:
    """Hard cluster assignments over a batch or dataset, with the cluster
    count k fixed by the E-step (a batch may miss some clusters)."""
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("pseudo labels must be 1-d")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("pseudo labels must lie in [0, k)")

    def take(self, idx) -> "PseudoLabels":
        return PseudoLabels(self.labels[idx], self.k)


@dataclass
class Prototypes:
    """Per-cluster centers from one batch: mu from the online embeddings
    (differentiable), mu_prime from the target embeddings (constant), and
    a mask marking clusters with no members in the batch."""
    mu: Tensor
    mu_prime: Tensor
    empty_mask: np.ndarray

    def __post_init__(self):
        self.empty_mask = np.asarray(self.empty_mask, dtype=bool)
        if self.mu.shape != self.mu_prime.shape or self.empty_mask.shape != (self.mu.shape[0],):
            raise ValueError("prototype matrices and mask must agree on the cluster count")
        norms = np.linalg.norm(self.mu.data, axis=1)
        if np.any(np.abs(norms[~self.empty_mask] - 1.0) > 1e-9):
            raise ValueError("non-empty prototype rows must be unit norm")
        if np.any(norms[self.empty_mask] > 1e-12):
            raise ValueError("empty prototype rows must be zero")


def infonce_loss(q, k, tau: float) -> Tensor:
    """In-batch InfoNCE: row i of q scores against every row of k, with
    k_i as the positive."""
    q, k = ag.tensor(q), ag.tensor(k)
    if q.data.ndim != 2 or q.shape != k.shape:
        raise ValueError("infonce_loss expects matching n x d inputs")
    if q.shape[0] < 2:
        raise ValueError("infonce_loss needs at least 2 rows to form negatives")
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / tau)
    pos = ag.scale(ag.sum_(ag.mul(q, k), axis=1), 1.0 / tau)
    return ag.mean(ag.sub(ag.logsumexp(logits, axis=1), pos))


def byol_align_loss(p, k) -> Tensor:
    """Mean squared row distance; equals mean(2 - 2 p.k) on unit rows."""
    return ag.mse_rowwise(p, k)


def sample_positive(z, sigma: float, rng: np.random.Generator) -> Tensor:
    """Reparametrized positive v = z + sigma * eps, eps ~ N(0, I).

    The noise enters as a constant, so d v / d z is the identity. eps is
    drawn even at sigma = 0 (where v == z exactly) to keep the generator's
    consumption independent of the knob.
    """
    z = ag.tensor(z)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    eps = rng.standard_normal(z.shape)
    return ag.add(z, ag.tensor(sigma * eps))


def aug_instance_loss(pair: NetworkPair, z_online, k_target, sigma: float,
                      rng: np.random.Generator, training: bool) -> Tensor:
    """Alignment of the predicted noisy positive with the target embedding."""
    v = sample_positive(z_online, sigma, rng)
    p = predict(pair, v, training)
    return byol_align_loss(p, ag.tensor(k_target))


def compute_centers(z, labels: PseudoLabels) -> tuple[Tensor, np.ndarray]:
    """Mini-batch cluster centers: one-hot(labels)^T, l1-normalized rows,
    matmul with z, l2-normalized rows. Empty clusters give zero rows and
    are flagged in the returned boolean mask."""
    z = ag.tensor(z)
    y = labels.labels
    if y.shape[0] != z.shape[0]:
        raise ValueError("labels must align with embedding rows")
    counts = np.bincount(y, minlength=labels.k)
    weights = np.zeros((labels.k, z.shape[0]))
    weights[y, np.arange(y.size)] = 1.0
    nonzero = counts > 0
    weights[nonzero] /= counts[nonzero, None]
    centers = ag.l2_normalize(ag.matmul(ag.tensor(weights), z))
    return centers, ~nonzero


def protocl_loss(protos: Prototypes, tau: float) -> Tensor:
    """Prototype contrastive loss averaged over non-empty clusters.

    Per cluster: -(mu_k . mu'_k)/tau + logsumexp of that alignment logit
    concatenated with the off-diagonal online-online uniformity logits,
    where columns of empty clusters are filled with a constant -10.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    k = protos.mu.shape[0]
    nonempty = ~protos.empty_mask
    n_active = int(nonempty.sum())
    if n_active == 0:
        raise ValueError("protocl_loss is undefined when every cluster is empty")
    align = ag.scale(ag.sum_(ag.mul(protos.mu, ag.detach(protos.mu_prime)), axis=1), 1.0 / tau)
    uniformity = ag.scale(ag.matmul(protos.mu, ag.transpose(protos.mu)), 1.0 / tau)
    col_keep = np.tile(nonempty.astype(float), (k, 1))
    col_fill = np.where(nonempty, 0.0, EMPTY_FILL)[None, :].repeat(k, axis=0)
    filled = ag.add(ag.mul(uniformity, ag.tensor(col_keep)), ag.tensor(col_fill))
    negatives = ag.offdiag(filled)
    combined = ag.concat_cols(ag.reshape(align, (k, 1)), negatives)
    per_cluster = ag.sub(ag.logsumexp(combined, axis=1), align)
    masked = ag.mul(per_cluster, ag.tensor(nonempty.astype(float)))
    return ag.scale(ag.sum_(masked), 1.0 / n_active)


def _forward_pass(pair, view_a, view_b, labels, cfg, lam, rng, training):
    """One direction of the symmetric loss: online(view_a) vs target(view_b)."""
    q = forward_online(pair, view_a, training)
    k = forward_target(pair, view_b, training)
    instance = aug_instance_loss(pair, q, k, cfg.sigma, rng, training)
    if lam == 0.0:
        return instance, float(instance.data), 0.0
    mu_q, empty_q = compute_centers(q, labels)
    mu_k, _ = compute_centers(k, labels)
    pcl = protocl_loss(Prototypes(mu=mu_q, mu_prime=mu_k, empty_mask=empty_q), cfg.tau)
    total = ag.add(instance, ag.scale(pcl, lam))
    return total, float(instance.data), float(pcl.data)


def ncc_loss(pair: NetworkPair, view1, view2, labels: PseudoLabels | None,
             cfg: LossConfig, rng: np.random.Generator, training: bool = True,
             in_warmup: bool = False) -> tuple[Tensor, dict]:
    """Symmetric loss over the two views; the prototype weight is forced to
    zero during warmup so the logged prototype component is exactly 0 there.

    Returns (scalar loss, {"align": ..., "pcl": ...}) with the components
    averaged the same way as the loss itself.
    """
    lam = 0.0 if in_warmup else cfg.lambda_pcl
    if lam > 0 and labels is None:
        raise ValueError("ncc_loss needs pseudo labels when lambda_pcl > 0")
    l1, a1, p1 = _forward_pass(pair, view1, view2, labels, cfg, lam, rng, training)
    l2, a2, p2 = _forward_pass(pair, view2, view1, labels, cfg, lam, rng, training)
    loss = ag.scale(ag.add(l1, l2), 0.5)
    return loss, {"align": 0.5 * (a1 + a2), "pcl": 0.5 * (p1 + p2)}


def byol_loss(pair: NetworkPair, view1, view2, training: bool = True) -> tuple[Tensor, dict]:
    """Baseline path: symmetric predictor-to-target alignment only."""
    def one(a, b):
        q = forward_online(pair, a, training)
        k = forward_target(pair, b, training)
        return byol_align_loss(predict(pair, q, training), k)

    l1, l2 = one(view1, view2), one(view2, view1)
    loss = ag.scale(ag.add(l1, l2), 0.5)
    return loss, {"align": float(loss.data), "pcl": 0.0}


def simclr_infonce_loss(pair: NetworkPair, view1, view2, tau: float,
                        training: bool = True) -> tuple[Tensor, dict]:
    """Baseline path: in-batch InfoNCE between the two online embeddings."""
    z1 = forward_online(pair, view1, training)
    z2 = forward_online(pair, view2, training)
    loss = ag.scale(ag.add(infonce_loss(z1, z2, tau), infonce_loss(z2, z1, tau)), 0.5)
    return loss, {"align": float(loss.data), "pcl": 0.0}


def nll_instance_to_prototype(z, labels: PseudoLabels, centroids, tau: float) -> Tensor:
    """Diagnostic: mean negative log-likelihood of each embedding's own
    prototype under a softmax over cosine/tau logits."""
    z = ag.tensor(z)
    centroids = np.asarray(centroids, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if centroids.ndim != 2 or centroids.shape[0] != labels.k:
        raise ValueError("centroids must be a k x d matrix matching the labels")
    y = labels.labels
    if y.shape[0] != z.shape[0]:
        raise ValueError("labels must align with embedding rows")
    logits = ag.scale(ag.matmul(z, ag.tensor(centroids.T)), 1.0 / tau)
    onehot = np.zeros((y.size, labels.k))
    onehot[np.arange(y.size), y] = 1.0
    own = ag.sum_(ag.mul(logits, ag.tensor(onehot)), axis=1)
    return ag.mean(ag.sub(ag.logsumexp(logits, axis=1), own))
