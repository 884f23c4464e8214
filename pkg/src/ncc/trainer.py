"""EM training loop.

E-step: spherical k-means on target-network features every r epochs
(including epoch 0, so pseudo-labels exist before the first gradient
step). M-step: SGD over mini-batches of two augmented views with linear
warmup, half-cosine decay, a 10x predictor learning rate, per-batch
momentum update of the target network, and weight decay that skips the
batchnorm scale/shift parameters.

Every random choice is drawn from a stream derived from (seed, stream
tag[, epoch]), so runs are bit-reproducible and the streams do not
interact: a method that never touches the sampling stream (the BYOL
path) still sees the same data order and augmentations as one that does.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .clustering import spherical_kmeans
from .data import AugmentSpec, Dataset, augment
from .losses import (LossConfig, PseudoLabels, byol_loss, ncc_loss,
                     simclr_infonce_loss)
from .metrics import MetricsReport, uniformity_std
from .model import (EncoderConfig, NetworkPair, forward_online,
                    forward_target, init_pair, momentum_update,
                    save_checkpoint)

__all__ = [
    "TrainConfig", "TrainState", "NonFiniteLossError", "METHODS",
    "lr_at", "extract_features", "e_step", "m_step_epoch", "train",
    "dump_embeddings",
]

METHODS = ("ncc", "byol", "simclr-infonce")

# stream tags feeding SeedSequence([seed, tag, ...])
_INIT, _ORDER, _AUGMENT, _SAMPLING, _ESTEP, _EVAL = range(6)


@dataclass(frozen=True)
class TrainConfig:
    k: int
    epochs: int = 200
    batch_size: int = 256
    r: int = 1
    warmup_epochs: int | None = None
    predictor_lr_mult: float = 10.0
    momentum: float = 0.996
    sgd_momentum: float = 0.0
    weight_decay: float = 1e-4
    eval_every: int = 25
    kmeans_restarts: int = 8
    method: str = "ncc"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    backbone_hidden: tuple = (128, 128)
    projector_hidden: int = 256
    projection_dim: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batchnorm")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")
        if self.predictor_lr_mult <= 0:
            raise ValueError("predictor_lr_mult must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError("sgd_momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.warmup_epochs is not None:
            if self.warmup_epochs < 0:
                raise ValueError("warmup_epochs must be >= 0")
            if self.epochs > 0 and self.warmup_epochs >= self.epochs:
                raise ValueError("warmup_epochs must be < epochs")

    @property
    def base_lr(self) -> float:
        return 0.05 * self.batch_size / 256.0

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        if self.epochs == 0:
            return 0
        # Clamp so the resolved value always satisfies warmup < epochs and a
        # run config written back to disk can be loaded again (epochs=1 would
        # otherwise resolve to warmup 1, which the validator rejects).
        return min(max(1, round(0.05 * self.epochs)), self.epochs - 1)

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim=input_dim,
                             backbone_hidden=tuple(self.backbone_hidden),
                             projector_hidden=self.projector_hidden,
                             projection_dim=self.projection_dim)


@dataclass
class TrainState:
    pair: NetworkPair
    pseudo: PseudoLabels | None
    epoch: int
    history: list
    augment_rng: np.random.Generator
    sampling_rng: np.random.Generator
    velocity: dict


class NonFiniteLossError(RuntimeError):
    """Raised when a mini-batch loss stops being finite; carries enough
    context to write a diagnostic file."""

    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite loss at epoch {diagnostics['epoch']} "
                         f"batch {diagnostics['batch']}")
        self.diagnostics = diagnostics


def _stream_seed(seed: int, *tags) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def lr_at(config: TrainConfig, epoch: int, step_frac: float) -> tuple[float, float]:
    """Encoder and predictor learning rates at a fractional epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError("epoch must lie in [0, epochs)")
    t = epoch + step_frac
    warmup = config.resolved_warmup
    if t < warmup:
        lr = config.base_lr * t / warmup
    else:
        progress = (t - warmup) / (config.epochs - warmup)
        lr = config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return lr, config.predictor_lr_mult * lr


def extract_features(pair: NetworkPair, dataset: Dataset, branch: str,
                     chunk: int = 512) -> np.ndarray:
    """Eval-mode embeddings for the whole dataset, in dataset row order.

    Eval batchnorm is per-row, so chunking cannot change the values.
    """
    if branch not in ("online", "target"):
        raise ValueError("branch must be 'online' or 'target'")
    forward = forward_online if branch == "online" else forward_target
    parts = []
    for start in range(0, dataset.features.shape[0], chunk):
        x = dataset.features[start:start + chunk]
        parts.append(forward(pair, x, False).data)
    return np.vstack(parts)


def e_step(state: TrainState, dataset: Dataset, config: TrainConfig):
    """Cluster target features into k pseudo-labels; returns the labels
    and the k-means objective."""
    feats = extract_features(state.pair, dataset, "target")
    result = spherical_kmeans(feats, config.k,
                              seed=_stream_seed(config.seed, _ESTEP, state.epoch),
                              n_init=config.kmeans_restarts)
    state.pseudo = PseudoLabels(result.labels, config.k)
    return state.pseudo, result


def _sgd_update(pair: NetworkPair, grads, leaves, config: TrainConfig,
                lr_encoder: float, lr_predictor: float, velocity: dict):
    for name in pair.trainable_names():
        store = pair._store_for(name)
        w = store.weights[name]
        g = grads[leaves[name]]
        if config.weight_decay > 0 and not name.endswith((".gamma", ".beta")):
            g = g + config.weight_decay * w
        lr = lr_predictor if name.startswith("predictor.") else lr_encoder
        if config.sgd_momentum > 0:
            v = velocity.setdefault(name, np.zeros_like(w))
            v *= config.sgd_momentum
            v += g
            g = v
        store.weights[name] = w - lr * g


def m_step_epoch(state: TrainState, dataset: Dataset, config: TrainConfig) -> dict:
    """One pass over the shuffled dataset; returns mean loss components."""
    n = dataset.features.shape[0]
    order_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _ORDER, state.epoch]))
    order = order_rng.permutation(n)
    starts = [s for s in range(0, n, config.batch_size)
              if min(s + config.batch_size, n) - s >= 2]
    in_warmup = state.epoch < config.resolved_warmup
    sums = {"loss": 0.0, "align": 0.0, "pcl": 0.0}
    for b, start in enumerate(starts):
        idx = order[start:start + config.batch_size]
        x = dataset.features[idx]
        view1 = augment(x, config.augment, state.augment_rng)
        view2 = augment(x, config.augment, state.augment_rng)
        tape = ag.Tape()
        with state.pair.recording(tape) as leaves:
            if config.method == "ncc":
                loss, comps = ncc_loss(state.pair, view1, view2,
                                       state.pseudo.take(idx), config.loss,
                                       state.sampling_rng, training=True,
                                       in_warmup=in_warmup)
            elif config.method == "byol":
                loss, comps = byol_loss(state.pair, view1, view2, training=True)
            else:
                loss, comps = simclr_infonce_loss(state.pair, view1, view2,
                                                  config.loss.tau, training=True)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLossError({"epoch": state.epoch, "batch": b,
                                      "loss": value,
                                      "loss_align": comps["align"],
                                      "loss_pcl": comps["pcl"]})
        grads = tape.backward(loss)
        lr_enc, lr_pred = lr_at(config, state.epoch, b / len(starts))
        _sgd_update(state.pair, grads, leaves, config, lr_enc, lr_pred,
                    state.velocity)
        momentum_update(state.pair)
        sums["loss"] += value
        sums["align"] += comps["align"]
        sums["pcl"] += comps["pcl"]
    return {k: v / len(starts) for k, v in sums.items()}


def _evaluate(state: TrainState, dataset: Dataset, config: TrainConfig) -> dict:
    """Fresh k-means on target features with a fixed evaluation seed,
    scored against true labels when present; spread is measured on the
    online features."""
    target = extract_features(state.pair, dataset, "target")
    online = extract_features(state.pair, dataset, "online")
    result = spherical_kmeans(target, config.k,
                              seed=_stream_seed(config.seed, _EVAL),
                              n_init=config.kmeans_restarts)
    report = MetricsReport.compute(result.labels, online, dataset.labels)
    return report.to_dict()


def dump_embeddings(path, dataset: Dataset, labels_pred: np.ndarray,
                    feats: np.ndarray) -> None:
    """CSV dump: id, true label when known, predicted label, features."""
    d = feats.shape[1]
    cols = ["id"] + (["label_true"] if dataset.labels is not None else []) \
        + ["label_pred"] + [f"f{i}" for i in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(feats.shape[0]):
            row = [str(int(dataset.ids[i]))]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            row.append(str(int(labels_pred[i])))
            row.extend("%.17g" % v for v in feats[i])
            fh.write(",".join(row) + "\n")


def train(config: TrainConfig, dataset: Dataset, out_dir=None):
    """Run the full EM loop; returns (state, final MetricsReport).

    When out_dir is given, streams metrics.jsonl, writes checkpoints on
    evaluation epochs and at the end, and dumps final target embeddings.
    """
    n, input_dim = dataset.features.shape
    if config.k > n:
        raise ValueError("k cannot exceed the dataset size")
    pair = init_pair(config.encoder_config(input_dim),
                     seed=_stream_seed(config.seed, _INIT), m=config.momentum)
    state = TrainState(
        pair=pair, pseudo=None, epoch=0, history=[],
        augment_rng=np.random.default_rng(
            np.random.SeedSequence([config.seed, _AUGMENT])),
        sampling_rng=np.random.default_rng(
            np.random.SeedSequence([config.seed, _SAMPLING])),
        velocity={})

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def emit(record):
        state.history.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()

    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            record = {"epoch": epoch}
            if epoch % config.r == 0:
                _, km = e_step(state, dataset, config)
                record["kmeans_obj"] = km.objective
            summary = m_step_epoch(state, dataset, config)
            record["loss"] = summary["loss"]
            record["loss_align"] = summary["align"]
            record["loss_pcl"] = summary["pcl"]
            is_eval = (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1
            if is_eval:
                record.update(_evaluate(state, dataset, config))
                if out_dir is not None:
                    save_checkpoint(
                        state.pair,
                        os.path.join(out_dir, f"checkpoint-epoch{epoch:04d}.json"))
            else:
                record["std"] = float(uniformity_std(
                    extract_features(state.pair, dataset, "online")))
            emit(record)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    # terminal E-step: final pseudo-labels and report
    state.epoch = config.epochs
    _, km = e_step(state, dataset, config)
    online = extract_features(state.pair, dataset, "online")
    report = MetricsReport.compute(state.pseudo.labels, online, dataset.labels)
    if out_dir is not None:
        save_checkpoint(state.pair, os.path.join(out_dir, "checkpoint-final.json"))
        target = extract_features(state.pair, dataset, "target")
        dump_embeddings(os.path.join(out_dir, "embeddings.csv"),
                        dataset, state.pseudo.labels, target)
        with open(os.path.join(out_dir, "final-report.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
    return state, report
