"""Hierarchical linear concept bottleneck over layered latents.

Each latent layer ``l`` is projected to ``d_c`` layer-wise concept features
``f_l = A_l w[:, l] + b_l``; the concatenated features feed one linear head
``logits = V f + c``.  Because the whole predictor is affine in the latent,
the gradient of a concept logit with respect to the latent is constant and
serves as that concept's activation direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class BottleneckModel:
    A: np.ndarray  # (L, d_c, N)
    b: np.ndarray  # (L, d_c)
    V: np.ndarray  # (K, L * d_c)
    c: np.ndarray  # (K,)
    concept_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        L, d_c, N = self.A.shape
        K = self.V.shape[0]
        if self.b.shape != (L, d_c) or self.V.shape != (K, L * d_c) or self.c.shape != (K,):
            raise ValueError("inconsistent bottleneck parameter shapes")
        if not self.concept_names:
            self.concept_names = [f"concept_{k}" for k in range(K)]
        if len(self.concept_names) != K:
            raise ValueError("need one name per concept")

    @property
    def dims_per_layer(self) -> int:
        return self.A.shape[2]

    @property
    def num_layers(self) -> int:
        return self.A.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.A.shape[1]

    @property
    def num_concepts(self) -> int:
        return self.V.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "b": self.b, "V": self.V, "c": self.c}

    def copy(self) -> "BottleneckModel":
        return BottleneckModel(self.A.copy(), self.b.copy(), self.V.copy(), self.c.copy(), list(self.concept_names))


@dataclass(frozen=True)
class ConceptPrediction:
    features: np.ndarray  # (..., L * d_c)
    logits: np.ndarray  # (..., K)
    probabilities: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class ConceptDirection:
    concept: int
    direction: np.ndarray  # (N, L), unit Frobenius norm
    raw: np.ndarray

    @property
    def raw_norm(self) -> float:
        return float(np.linalg.norm(self.raw))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_model(
    num_concepts: int,
    dims_per_layer: int = 8,
    num_layers: int = 6,
    feature_dim: int = 8,
    seed: int = 0,
    concept_names: list[str] | None = None,
) -> BottleneckModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if min(num_concepts, dims_per_layer, num_layers, feature_dim) < 1:
        raise ValueError("all bottleneck dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    a_bound = 1.0 / np.sqrt(dims_per_layer)
    v_bound = 1.0 / np.sqrt(num_layers * feature_dim)
    A = rng.uniform(-a_bound, a_bound, size=(num_layers, feature_dim, dims_per_layer))
    V = rng.uniform(-v_bound, v_bound, size=(num_concepts, num_layers * feature_dim))
    return BottleneckModel(
        A=A,
        b=np.zeros((num_layers, feature_dim)),
        V=V,
        c=np.zeros(num_concepts),
        concept_names=list(concept_names or []),
    )


def _check_latents(model: BottleneckModel, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-2:] != (model.dims_per_layer, model.num_layers):
        raise ValueError(
            f"latent shape {w.shape[-2:]} does not match model "
            f"({model.dims_per_layer}, {model.num_layers})"
        )
    return w


def layer_features(model: BottleneckModel, w: np.ndarray) -> np.ndarray:
    """Layer-wise concept features, shape ``(..., L, d_c)``."""
    w = _check_latents(model, w)
    lead = w.shape[:-2]
    per_layer = np.moveaxis(w.reshape(-1, *w.shape[-2:]), -1, 0)  # (L, B, N)
    f = per_layer @ model.A.transpose(0, 2, 1)  # (L, B, d_c)
    return np.moveaxis(f, 0, -2).reshape(*lead, *model.b.shape) + model.b


def forward(model: BottleneckModel, w: np.ndarray, threshold: float = 0.5) -> ConceptPrediction:
    """Predict concepts for one latent ``(N, L)`` or a batch ``(B, N, L)``."""
    f = layer_features(model, w)
    f = f.reshape(*f.shape[:-2], -1)
    logits = f @ model.V.T + model.c
    probs = sigmoid(logits)
    return ConceptPrediction(f, logits, probs, (probs >= threshold).astype(np.uint8))


def predict_concepts(model: BottleneckModel, w: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    # p == threshold counts as positive
    return forward(model, w, threshold).labels


def flattened_map(model: BottleneckModel) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the bottleneck into one affine map on layer-major ``vec(w)``.

    Returns ``(M, m)`` with ``logits = M @ w.T.ravel() + m``.
    """
    L, d_c, N = model.A.shape
    block = np.zeros((L * d_c, L * N))
    for l in range(L):
        block[l * d_c:(l + 1) * d_c, l * N:(l + 1) * N] = model.A[l]
    return model.V @ block, model.V @ model.b.ravel() + model.c


def bce_loss(probabilities, labels) -> float:
    """Mean binary cross-entropy, probabilities clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def loss_and_grad(model: BottleneckModel, latents: np.ndarray, labels: np.ndarray):
    """Mean BCE over samples and concepts and its exact parameter gradient.

    Where the clamp is active the loss is flat in the logit, so those entries
    contribute no gradient.
    """
    w = _check_latents(model, latents)
    per_layer = np.ascontiguousarray(w.transpose(2, 0, 1))
    return _loss_and_grad(model, per_layer, np.asarray(labels, dtype=np.float64))


def _loss_and_grad(model: BottleneckModel, per_layer: np.ndarray, y: np.ndarray):
    # per_layer: (L, B, N) contiguous
    B, K = y.shape
    f = per_layer @ model.A.transpose(0, 2, 1) + model.b[:, None, :]  # (L, B, d_c)
    f_flat = f.transpose(1, 0, 2).reshape(B, -1)
    logits = f_flat @ model.V.T + model.c
    p = sigmoid(logits)
    loss = bce_loss(p, y)

    active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    g_logits = np.where(active, p - y, 0.0) / (B * K)
    g_V = g_logits.T @ f_flat
    g_c = g_logits.sum(axis=0)
    g_f = (g_logits @ model.V).reshape(B, *model.b.shape).transpose(1, 2, 0)  # (L, d_c, B)
    g_A = g_f @ per_layer
    g_b = g_f.sum(axis=2)
    return loss, {"A": g_A, "b": g_b, "V": g_V, "c": g_c}


def train(
    model: BottleneckModel,
    latents: np.ndarray,
    concept_labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[BottleneckModel, np.ndarray]:
    """Full-batch gradient descent with momentum; returns a new model and the loss curve."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(concept_labels)
    if len(latents) == 0:
        raise ValueError("training set is empty")
    if labels.shape != (len(latents), model.num_concepts):
        raise ValueError(f"labels must have shape ({len(latents)}, {model.num_concepts})")

    model = model.copy()
    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    losses = np.empty(cfg.epochs)
    per_layer = np.ascontiguousarray(_check_latents(model, latents).transpose(2, 0, 1))
    y = labels.astype(np.float64)
    for epoch in range(cfg.epochs):
        loss, grads = _loss_and_grad(model, per_layer, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        losses[epoch] = loss
        for k, g in grads.items():
            velocity[k] *= cfg.momentum
            velocity[k] += g
            params[k] -= cfg.lr * velocity[k]
    log.debug("trained bottleneck: final loss %.6f", losses[-1])
    return model, losses


def task_rule(concepts, k_min: int = 2):
    """Positive iff at least ``k_min`` concepts are present (works on batches)."""
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    concepts = np.asarray(concepts)
    return (concepts.sum(axis=-1) >= k_min).astype(np.uint8)


def concept_direction(model: BottleneckModel, k: int) -> ConceptDirection:
    """Gradient of concept ``k``'s logit with respect to the latent."""
    L, d_c, _ = model.A.shape
    v_k = model.V[k].reshape(L, d_c)
    raw = np.einsum("ldn,ld->nl", model.A, v_k)
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise ValueError("concept has no latent influence")
    return ConceptDirection(k, raw / norm, raw)


def counterfactual_logit_curve(model: BottleneckModel, w: np.ndarray, k: int, magnitudes) -> list[tuple[float, float]]:
    d = concept_direction(model, k).direction
    es = np.asarray(list(magnitudes), dtype=np.float64)
    logits = forward(model, np.asarray(w)[None] + es[:, None, None] * d).logits[:, k]
    return [(float(e), float(z)) for e, z in zip(es, logits)]
