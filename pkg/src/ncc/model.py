"""Online/target encoder pair with a predictor head.

Both encoders share one architecture: an MLP backbone of Linear-BN-ReLU
blocks followed by a Linear-BN-ReLU-Linear projector, with the output
l2-normalized onto the sphere. The predictor has the same two-layer shape
and also normalizes its output. The target encoder is a momentum copy of
the online one and never participates in differentiation.

Gradient bookkeeping: forwards read weights from the pair's active
"recording" when one is open (a name -> Tensor map attached to a tape, or
derived from a flat parameter vector for gradient checking); otherwise
weights enter as constants and the forward is just numpy.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import BNState, Tensor

__all__ = [
    "EncoderConfig", "Params", "NetworkPair", "init_pair",
    "forward_online", "forward_target", "predict", "momentum_update",
    "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_FORMAT = "ncc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    backbone_hidden: tuple = (128, 128)
    projector_hidden: int = 256
    projection_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "backbone_hidden", tuple(int(h) for h in self.backbone_hidden))
        dims = (self.input_dim, self.projector_hidden, self.projection_dim) + self.backbone_hidden
        if any(d < 1 for d in dims):
            raise ValueError("all layer widths must be positive")
        if not self.backbone_hidden:
            raise ValueError("backbone needs at least one hidden layer")


class Params:
    """One network's learnable arrays plus batchnorm running state."""

    def __init__(self, weights: dict, bn: dict):
        self.weights = weights
        self.bn = bn

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.weights.items()},
                      {k: s.copy() for k, s in self.bn.items()})


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_block(rng, weights, bn, prefix, fan_in, fan_out, with_bn=True):
    weights[f"{prefix}.W"] = _he_uniform(rng, fan_in, fan_out)
    weights[f"{prefix}.b"] = np.zeros(fan_out)
    if with_bn:
        weights[f"{prefix}.gamma"] = np.ones(fan_out)
        weights[f"{prefix}.beta"] = np.zeros(fan_out)
        bn[prefix] = BNState(fan_out)


def _init_encoder(cfg: EncoderConfig, rng) -> Params:
    weights, bn = {}, {}
    fan = cfg.input_dim
    for i, width in enumerate(cfg.backbone_hidden):
        _init_block(rng, weights, bn, f"backbone.{i}", fan, width)
        fan = width
    _init_block(rng, weights, bn, "projector.fc1", fan, cfg.projector_hidden)
    _init_block(rng, weights, bn, "projector.fc2", cfg.projector_hidden,
                cfg.projection_dim, with_bn=False)
    return Params(weights, bn)


def _init_predictor(cfg: EncoderConfig, rng) -> Params:
    weights, bn = {}, {}
    _init_block(rng, weights, bn, "predictor.fc1", cfg.projection_dim, cfg.projector_hidden)
    _init_block(rng, weights, bn, "predictor.fc2", cfg.projector_hidden,
                cfg.projection_dim, with_bn=False)
    return Params(weights, bn)


class NetworkPair:
    """theta: online encoder; theta_prime: its momentum copy; phi: predictor."""

    def __init__(self, cfg: EncoderConfig, theta: Params, theta_prime: Params,
                 phi: Params, m: float = 0.996):
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum m must lie in [0, 1]")
        self.cfg = cfg
        self.theta = theta
        self.theta_prime = theta_prime
        self.phi = phi
        self.m = float(m)
        self._rec = None

    def trainable_names(self):
        """Stable order: encoder weights, then predictor weights."""
        return list(self.theta.weights) + list(self.phi.weights)

    def _store_for(self, name):
        return self.phi if name.startswith("predictor.") else self.theta

    def params_vector(self) -> np.ndarray:
        return np.concatenate(
            [self._store_for(n).weights[n].ravel() for n in self.trainable_names()])

    @contextmanager
    def recording(self, tape: ag.Tape):
        """Watch every trainable array on the tape; yields name -> leaf Tensor."""
        if self._rec is not None:
            raise RuntimeError("a recording is already active on this pair")
        tensors = {n: tape.watch(self._store_for(n).weights[n])
                   for n in self.trainable_names()}
        self._rec = tensors
        try:
            yield tensors
        finally:
            self._rec = None

    @contextmanager
    def recording_from_vector(self, vec: Tensor):
        """Derive every weight from slices of one flat vector (for grad checks)."""
        if self._rec is not None:
            raise RuntimeError("a recording is already active on this pair")
        tensors, offset = {}, 0
        for n in self.trainable_names():
            shape = self._store_for(n).weights[n].shape
            size = int(np.prod(shape))
            piece = ag.slice1d(vec, offset, offset + size)
            tensors[n] = ag.reshape(piece, shape) if len(shape) > 1 else piece
            offset += size
        if offset != vec.data.size:
            raise ValueError(f"parameter vector has size {vec.data.size}, expected {offset}")
        self._rec = tensors
        try:
            yield tensors
        finally:
            self._rec = None


def init_pair(cfg: EncoderConfig, seed: int, m: float = 0.996) -> NetworkPair:
    """Fresh pair with theta_prime an exact copy of theta."""
    rng = np.random.default_rng(seed)
    theta = _init_encoder(cfg, rng)
    phi = _init_predictor(cfg, rng)
    return NetworkPair(cfg, theta, theta.copy(), phi, m=m)


def _weight(pair, store, name, live):
    if live and pair._rec is not None:
        return pair._rec[name]
    return ag.tensor(store.weights[name])


def _block(pair, store, h, prefix, training, live, activate=True):
    w = _weight(pair, store, f"{prefix}.W", live)
    b = _weight(pair, store, f"{prefix}.b", live)
    h = ag.add(ag.matmul(h, w), b)
    if prefix in store.bn:
        h = ag.batchnorm1d(h, _weight(pair, store, f"{prefix}.gamma", live),
                           _weight(pair, store, f"{prefix}.beta", live),
                           store.bn[prefix], training)
    if activate:
        h = ag.relu(h)
    return h


def _encode(pair, store, x, training, live):
    h = ag.tensor(x)
    if h.data.ndim != 2 or h.shape[1] != pair.cfg.input_dim:
        raise ValueError(f"encoder expects n x {pair.cfg.input_dim} input, got {h.shape}")
    for i in range(len(pair.cfg.backbone_hidden)):
        h = _block(pair, store, h, f"backbone.{i}", training, live)
    h = _block(pair, store, h, "projector.fc1", training, live)
    h = _block(pair, store, h, "projector.fc2", training, live, activate=False)
    return ag.l2_normalize(h)


def forward_online(pair: NetworkPair, x, training: bool) -> Tensor:
    """l2-normalized online embedding; differentiable when a recording is open."""
    return _encode(pair, pair.theta, x, training, live=True)


def forward_target(pair: NetworkPair, x, training: bool = False) -> Tensor:
    """Target embedding through theta_prime; never on the tape."""
    return ag.detach(_encode(pair, pair.theta_prime, x, training, live=False))


def predict(pair: NetworkPair, v, training: bool) -> Tensor:
    """Predictor head applied to a (possibly off-sphere) embedding, then
    re-normalized."""
    h = ag.tensor(v)
    if h.data.ndim != 2 or h.shape[1] != pair.cfg.projection_dim:
        raise ValueError(f"predictor expects n x {pair.cfg.projection_dim} input, got {h.shape}")
    h = _block(pair, pair.phi, h, "predictor.fc1", training, live=True)
    h = _block(pair, pair.phi, h, "predictor.fc2", training, live=True, activate=False)
    return ag.l2_normalize(h)


def momentum_update(pair: NetworkPair) -> None:
    """theta_prime <- m * theta_prime + (1 - m) * theta, in place."""
    for name, src in pair.theta.weights.items():
        dst = pair.theta_prime.weights[name]
        dst *= pair.m
        dst += (1.0 - pair.m) * src


def _params_to_blob(p: Params) -> dict:
    return {
        "weights": {n: {"shape": list(a.shape), "data": a.ravel().tolist()}
                    for n, a in p.weights.items()},
        "bn": {n: {"running_mean": s.running_mean.tolist(),
                   "running_var": s.running_var.tolist(),
                   "momentum": s.momentum, "eps": s.eps}
               for n, s in p.bn.items()},
    }


def _params_from_blob(blob: dict) -> Params:
    weights = {n: np.array(w["data"], dtype=np.float64).reshape(w["shape"])
               for n, w in blob["weights"].items()}
    bn = {}
    for n, s in blob["bn"].items():
        state = BNState(len(s["running_mean"]), s["momentum"], s["eps"])
        state.running_mean = np.array(s["running_mean"], dtype=np.float64)
        state.running_var = np.array(s["running_var"], dtype=np.float64)
        bn[n] = state
    return Params(weights, bn)


def save_checkpoint(pair: NetworkPair, path) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "m": pair.m,
        "config": {
            "input_dim": pair.cfg.input_dim,
            "backbone_hidden": list(pair.cfg.backbone_hidden),
            "projector_hidden": pair.cfg.projector_hidden,
            "projection_dim": pair.cfg.projection_dim,
        },
        "theta": _params_to_blob(pair.theta),
        "theta_prime": _params_to_blob(pair.theta_prime),
        "phi": _params_to_blob(pair.phi),
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, separators=(",", ":"))


def load_checkpoint(path) -> NetworkPair:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = EncoderConfig(
        input_dim=blob["config"]["input_dim"],
        backbone_hidden=tuple(blob["config"]["backbone_hidden"]),
        projector_hidden=blob["config"]["projector_hidden"],
        projection_dim=blob["config"]["projection_dim"],
    )
    return NetworkPair(cfg, _params_from_blob(blob["theta"]),
                       _params_from_blob(blob["theta_prime"]),
                       _params_from_blob(blob["phi"]), m=blob["m"])
