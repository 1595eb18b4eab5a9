"""Two-layer GCN and structure-free MLP with hand-written backprop.

GCN:  logits = A . relu(A . X . W0 + b0) . W1 + b1
MLP:  logits = relu(X . W0 + b0) . W1 + b1

``A`` is a :class:`NormalizedAdjacency`; passing ``None`` yields the MLP.
Everything runs in float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .graph import NodeSplit, NormalizedAdjacency
from .optim import Adam, glorot_uniform

log = logging.getLogger(__name__)


class GcnError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class GcnConfig:
    hidden: int = 128
    lr: float = 0.01
    epochs: int = 300
    patience: int = 30
    weight_decay: float = 5e-4
    dropout: float = 0.0
    bias: bool = True
    seed: int = 0


@dataclass(eq=False)
class GcnParams:
    W0: np.ndarray
    W1: np.ndarray
    b0: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None

    @classmethod
    def init(cls, in_dim: int, hidden: int, num_classes: int, seed: int, bias: bool = True) -> "GcnParams":
        rng = np.random.default_rng(seed)
        W0 = glorot_uniform(rng, in_dim, hidden)
        W1 = glorot_uniform(rng, hidden, num_classes)
        if bias:
            return cls(W0, W1, np.zeros(hidden), np.zeros(num_classes))
        return cls(W0, W1)

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"W0": self.W0, "W1": self.W1}
        if self.b0 is not None:
            out["b0"] = self.b0
            out["b1"] = self.b1
        return out

    def copy(self) -> "GcnParams":
        return GcnParams(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass
class TrainReport:
    best_valid_accuracy: float
    test_accuracy: float
    epochs_run: int
    loss_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def loss_csv(self) -> str:
        return "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(self.loss_curve, start=1))


def _propagate(adj: Optional[NormalizedAdjacency], m: np.ndarray) -> np.ndarray:
    return m if adj is None else adj.matrix @ m


def _forward(adj, X, p: GcnParams, drop_mask: Optional[np.ndarray] = None):
    if p.W0.shape[0] != X.shape[1]:
        raise GcnError(f"feature dimension {X.shape[1]} != W0 input dimension {p.W0.shape[0]}")
    if p.W1.shape[0] != p.W0.shape[1]:
        raise GcnError(f"W1 rows {p.W1.shape[0]} != hidden size {p.W0.shape[1]}")
    if adj is not None and adj.n != X.shape[0]:
        raise GcnError(f"adjacency is {adj.n}x{adj.n} but X has {X.shape[0]} rows")
    AX = _propagate(adj, X)
    Z = AX @ p.W0
    if p.b0 is not None:
        Z = Z + p.b0
    H = np.maximum(Z, 0.0)
    if drop_mask is not None:
        H = H * drop_mask
    AH = _propagate(adj, H)
    logits = AH @ p.W1
    if p.b1 is not None:
        logits = logits + p.b1
    return logits, (AX, Z, H, AH)


def gcn_forward(adj: Optional[NormalizedAdjacency], X: np.ndarray, p: GcnParams) -> np.ndarray:
    return _forward(adj, np.asarray(X, dtype=np.float64), p)[0]


def mlp_forward(X: np.ndarray, p: GcnParams) -> np.ndarray:
    return gcn_forward(None, X, p)


def _as_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if mask.size == 0:
        raise GcnError("mask must select at least one node")
    return mask.astype(np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked rows and its gradient w.r.t. all logits."""
    idx = _as_mask(mask, logits.shape[0])
    labels = np.asarray(labels)
    sub = logits[idx]
    shifted = sub - sub.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    rows = np.arange(idx.size)
    loss = float(-log_p[rows, labels[idx]].mean())
    dsub = np.exp(log_p)
    dsub[rows, labels[idx]] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[idx] = dsub / idx.size
    return loss, dlogits


def loss_and_grads(adj: Optional[NormalizedAdjacency], X: np.ndarray, p: GcnParams, labels, mask,
                   drop_mask: Optional[np.ndarray] = None) -> tuple[float, dict[str, np.ndarray]]:
    """Masked cross-entropy of the forward pass and gradients for every parameter."""
    logits, (AX, Z, H, AH) = _forward(adj, X, p, drop_mask)
    loss, G = softmax_cross_entropy(logits, labels, mask)
    grads = {"W1": AH.T @ G}
    if p.b1 is not None:
        grads["b1"] = G.sum(axis=0)
    # A is symmetric, so A^T G = A G.
    dH = _propagate(adj, G) @ p.W1.T
    if drop_mask is not None:
        dH = dH * drop_mask
    dZ = dH * (Z > 0)
    grads["W0"] = AX.T @ dZ
    if p.b0 is not None:
        grads["b0"] = dZ.sum(axis=0)
    return loss, grads


def evaluate_accuracy(logits: np.ndarray, labels, mask) -> float:
    """Fraction of masked nodes whose argmax logit (lowest index on ties) equals the label."""
    idx = _as_mask(mask, logits.shape[0])
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == np.asarray(labels)[idx]))


def train_gcn(adj: Optional[NormalizedAdjacency], X: np.ndarray, labels, split: NodeSplit,
              cfg: GcnConfig = GcnConfig()) -> tuple[GcnParams, TrainReport]:
    """Adam training with early stopping on validation accuracy.

    Test accuracy is read at the best-validation checkpoint (first one on ties).
    L2 weight decay applies to the weight matrices, not the biases.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    params = GcnParams.init(X.shape[1], cfg.hidden, num_classes, cfg.seed, cfg.bias)
    named = params.as_dict()
    opt = Adam(named, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)

    best_valid, best_test, best_epoch = -1.0, 0.0, 0
    best_params = params.copy()
    curve: list[float] = []
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        drop = None
        if cfg.dropout > 0:
            keep = 1.0 - cfg.dropout
            drop = (rng.random((X.shape[0], cfg.hidden)) < keep) / keep
        loss, grads = loss_and_grads(adj, X, params, labels, split.train, drop)
        if not np.isfinite(loss):
            report = TrainReport(max(best_valid, 0.0), best_test, epoch, curve, best_epoch)
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", report)
        curve.append(loss)
        if cfg.weight_decay:
            grads["W0"] = grads["W0"] + cfg.weight_decay * params.W0
            grads["W1"] = grads["W1"] + cfg.weight_decay * params.W1
        opt.step(grads)

        logits = gcn_forward(adj, X, params)
        valid = evaluate_accuracy(logits, labels, split.valid)
        if valid > best_valid:
            best_valid, best_epoch, stale = valid, epoch, 0
            best_test = evaluate_accuracy(logits, labels, split.test)
            best_params = params.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_params, TrainReport(best_valid, best_test, epoch, curve, best_epoch)


def train_mlp(X: np.ndarray, labels, split: NodeSplit, cfg: GcnConfig = GcnConfig()) -> TrainReport:
    return train_gcn(None, X, labels, split, cfg)[1]
