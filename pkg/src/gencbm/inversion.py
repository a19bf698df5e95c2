"""Mapping images back to layered latents.

Two encoders share one reconstruction objective::

    total = l_pix * mean|render(w) - I| + l_perc * mean(phi(render(w)) - phi(I))^2
            + l_w * mean(w - w_mean)^2

where ``phi`` is a fixed three-level average-pool pyramid.  ``invert_optimize``
minimizes it per image with momentum descent on central finite-difference
gradients; ``fit_regression_encoder`` is an amortized ridge map from pyramid
features to latents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .renderer import ACTIVE_COORDS, GEOMETRY_COORDS, LatentSpec, lesion_mask, render_batch

log = logging.getLogger(__name__)

FEATURE_LAYOUT = "avgpool-pyramid-1-2-4/v1"


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0
    perceptual: float = 0.5
    latent: float = 0.01

    def __post_init__(self):
        for name in ("pixel", "perceptual", "latent"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")

    def to_dict(self) -> dict:
        return {"pixel": self.pixel, "perceptual": self.perceptual, "latent": self.latent}


@dataclass(frozen=True)
class LossTerms:
    total: float
    pixel: float
    perceptual: float
    reg: float


def _half(images: np.ndarray) -> np.ndarray:
    # 2x2 average pooling of a (B, H, W, C) stack via strided sums
    rows = images[:, 0::2] + images[:, 1::2]
    return 0.25 * (rows[:, :, 0::2] + rows[:, :, 1::2])


def surrogate_features(images: np.ndarray) -> np.ndarray:
    """Concatenated full, /2 and /4 average-pooled copies of an image.

    Accepts ``(S, S, 3)`` or a batch ``(B, S, S, 3)``; returns flat vectors of
    length ``3 * (S^2 + (S/2)^2 + (S/4)^2)``.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    S = images.shape[1]
    if images.shape[1] % 4 or images.shape[2] % 4:
        raise ValueError(f"image size {images.shape[1:3]} is not divisible by 4")
    B = len(images)
    half = _half(images)
    feats = np.concatenate([images.reshape(B, -1), half.reshape(B, -1), _half(half).reshape(B, -1)], axis=1)
    assert feats.shape[1] == 3 * (S * S + (S // 2) ** 2 + (S // 4) ** 2)
    return feats[0] if single else feats


def feature_length(spec: LatentSpec) -> int:
    S = spec.image_size
    return 3 * (S * S + (S // 2) ** 2 + (S // 4) ** 2)


class ReconstructionObjective:
    """Reconstruction loss for one target image, evaluable on latent batches."""

    def __init__(self, target: np.ndarray, spec: LatentSpec, weights: LossWeights = LossWeights(), mean_latent=None):
        self.target = np.asarray(target, dtype=np.float64)
        self.spec = spec
        self.weights = weights
        self.mean_latent = np.zeros(spec.shape) if mean_latent is None else np.asarray(mean_latent, dtype=np.float64)
        self.target_features = surrogate_features(self.target)

    def terms_batch(self, latents: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Per-latent ``(total, pixel, perceptual, reg)`` rows for a batch ``(B, N, L)``.

        Pooling is linear, so the feature difference is the pyramid of the
        pixel difference and needs no separate feature vectors.
        """
        latents = np.asarray(latents, dtype=np.float64)
        diff = render_batch(latents, self.spec, mask)
        diff -= self.target
        B = len(latents)
        pixel = np.abs(diff).reshape(B, -1).mean(axis=1)
        half = _half(diff)
        quarter = _half(half)
        sq = (diff * diff).reshape(B, -1).sum(axis=1)
        sq += (half * half).reshape(B, -1).sum(axis=1)
        sq += (quarter * quarter).reshape(B, -1).sum(axis=1)
        perceptual = sq / self.target_features.size
        reg = ((latents - self.mean_latent) ** 2).reshape(B, -1).mean(axis=1)
        wt = self.weights
        total = wt.pixel * pixel + wt.perceptual * perceptual + wt.latent * reg
        return np.stack([total, pixel, perceptual, reg], axis=1)

    def __call__(self, w: np.ndarray) -> float:
        return float(self.terms_batch(np.asarray(w)[None])[0, 0])

    def value_and_gradient(self, w: np.ndarray, h: float = 1e-3) -> tuple[float, np.ndarray]:
        """Loss at ``w`` and its central-difference gradient.

        Only coordinates the renderer reads are rendered; the others only move
        the quadratic latent term, whose central difference is exact, so it
        is filled in analytically.  Coordinates that leave the lesion mask
        alone reuse the mask of ``w``, and ``w`` itself rides along in that
        batch to supply the loss value.
        """
        w = np.asarray(w, dtype=np.float64)
        N = self.spec.dims_per_layer
        shape_moving = [(d, l) for l, d in GEOMETRY_COORDS if d < N]
        recolor = [(d, l) for l, d in ACTIVE_COORDS if d < N and (l, d) not in GEOMETRY_COORDS]
        grad = 2.0 * self.weights.latent * (w - self.mean_latent) / w.size
        value = np.nan
        for coords, mask in ((shape_moving, None), (recolor, lesion_mask(w, self.spec))):
            batch = np.repeat(w[None], 2 * len(coords) + 1, axis=0)
            for i, (dim, layer) in enumerate(coords):
                batch[2 * i + 1, dim, layer] += h
                batch[2 * i + 2, dim, layer] -= h
            if mask is None:
                batch = batch[1:]
                totals = np.concatenate([[np.nan], self.terms_batch(batch, mask)[:, 0]])
            else:
                totals = self.terms_batch(batch, mask)[:, 0]
                value = float(totals[0])
            for i, (dim, layer) in enumerate(coords):
                grad[dim, layer] = (totals[2 * i + 1] - totals[2 * i + 2]) / (2.0 * h)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        return value, grad

    def gradient(self, w: np.ndarray, h: float = 1e-3) -> np.ndarray:
        return self.value_and_gradient(w, h)[1]


def reconstruction_loss(image, w, spec: LatentSpec, weights: LossWeights = LossWeights(), mean_latent=None) -> LossTerms:
    obj = ReconstructionObjective(image, spec, weights, mean_latent)
    return LossTerms(*(float(x) for x in obj.terms_batch(np.asarray(w)[None])[0]))


def finite_diff_grad(f, w: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of a latent matrix."""
    if not h > 0:
        raise ValueError("step h must be positive")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    for idx in np.ndindex(w.shape):
        up = w.copy()
        down = w.copy()
        up[idx] += h
        down[idx] -= h
        fu, fd = f(up), f(down)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise FloatingPointError(f"non-finite objective at coordinate {idx}")
        grad[idx] = (fu - fd) / (2.0 * h)
    return grad


@dataclass
class InversionResult:
    latent: np.ndarray
    best_loss: float
    losses: np.ndarray
    best_losses: np.ndarray
    diverged: bool = False
    steps_run: int = 0


def invert_optimize(
    image: np.ndarray,
    spec: LatentSpec,
    weights: LossWeights = LossWeights(),
    steps: int = 300,
    lr: float = 0.5,
    momentum: float = 0.9,
    mean_latent=None,
    h: float = 1e-3,
) -> InversionResult:
    """Per-image latent inversion by momentum descent from the mean latent.

    Returns the lowest-loss iterate seen.  If the loss turns non-finite the
    run stops and the best finite iterate is returned with ``diverged`` set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    obj = ReconstructionObjective(image, spec, weights, mean_latent)
    w = obj.mean_latent.copy()
    velocity = np.zeros_like(w)
    best_w, best = w.copy(), np.inf
    losses, best_losses = [], []
    diverged = False
    for _ in range(steps):
        try:
            loss, g = obj.value_and_gradient(w, h)
        except FloatingPointError:
            loss, g = obj(w), None
        if not np.isfinite(loss):
            diverged = True
            log.warning("inversion diverged after %d steps", len(losses))
            break
        losses.append(loss)
        if loss < best:
            best, best_w = loss, w.copy()
        best_losses.append(best)
        if g is None:
            diverged = True
            break
        velocity = momentum * velocity + g
        w = w - lr * velocity
    return InversionResult(best_w, float(best), np.asarray(losses), np.asarray(best_losses), diverged, len(losses))


@dataclass
class RegressionEncoder:
    weights: np.ndarray  # (F, N * L)
    bias: np.ndarray  # (N * L,)
    spec: LatentSpec
    ridge: float = 1e-3
    train_mse: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        out = self.spec.size
        if self.weights.ndim != 2 or self.weights.shape[1] != out or self.bias.shape != (out,):
            raise ValueError("encoder parameter shapes do not match the latent spec")


def _ridge_solve(X: np.ndarray, Y: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    # minimizes mean ||x W + b - y||^2 + ridge ||W||^2 (duplication invariant)
    n, d = X.shape
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    if d <= n:
        W = np.linalg.solve(Xc.T @ Xc / n + ridge * np.eye(d), Xc.T @ Yc / n)
    else:
        # push-through identity: same solution through the n x n system
        alpha = np.linalg.solve(Xc @ Xc.T / n + ridge * np.eye(n), Yc / n)
        W = Xc.T @ alpha
    return W, y_mean - x_mean @ W


def fit_regression_encoder(
    features: np.ndarray,
    latents: np.ndarray,
    spec: LatentSpec,
    ridge: float = 1e-3,
) -> RegressionEncoder:
    """Closed-form ridge regression from feature vectors to flattened latents."""
    X = np.asarray(features, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("need at least two training samples")
    if len(X) != len(latents):
        raise ValueError("features and latents must have the same length")
    if ridge <= 0:
        raise ValueError("ridge coefficient must be positive")
    Y = latents.reshape(len(latents), -1)
    W, b = _ridge_solve(X, Y, ridge)
    mse = float(np.mean((X @ W + b - Y) ** 2))
    log.info("regression encoder: train latent MSE %.4f", mse)
    return RegressionEncoder(W, b, spec, ridge, mse, {"feature_layout": FEATURE_LAYOUT})


def fit_encoder_on_images(images: np.ndarray, latents: np.ndarray, spec: LatentSpec, ridge: float = 1e-3) -> RegressionEncoder:
    """Fit on uint8 or float images via their surrogate features."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    return fit_regression_encoder(surrogate_features(images), latents, spec, ridge)


def encode(enc: RegressionEncoder, images: np.ndarray) -> np.ndarray:
    """Affine map of surrogate features, reshaped to ``(N, L)`` (or a batch)."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    feats = surrogate_features(images)
    if feats.shape[-1] != enc.weights.shape[0]:
        raise ValueError(f"feature length {feats.shape[-1]} does not match encoder input {enc.weights.shape[0]}")
    flat = feats @ enc.weights + enc.bias
    return flat.reshape(*flat.shape[:-1], *enc.spec.shape)
