"""Counterfactual concept grounding.

A latent is pushed along a concept direction by each magnitude of a fixed
spectrum.  Every counterfactual is compared with the unperturbed
reconstruction on the 8-bit scale, the difference map is smoothed and
binarized against an adaptive threshold, and the per-magnitude masks are
combined by a pixel-wise vote.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from .bottleneck import BottleneckModel, concept_direction
from .formats import write_image, write_json, write_mask
from .renderer import LatentSpec, render_batch

DEFAULT_MAGNITUDES = (-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0)


@dataclass(frozen=True)
class MagnitudeSpectrum:
    magnitudes: tuple[float, ...] = DEFAULT_MAGNITUDES
    theta: int = 5
    delta_min: float = 5.0
    sigma: float = 3.0
    percentile: float = 95.0

    def __post_init__(self):
        mags = tuple(float(e) for e in self.magnitudes)
        object.__setattr__(self, "magnitudes", mags)
        if not mags:
            raise ValueError("spectrum needs at least one magnitude")
        if any(e == 0.0 for e in mags):
            raise ValueError("spectrum magnitudes must be nonzero")
        if len(set(mags)) != len(mags):
            raise ValueError("spectrum magnitudes must be distinct")
        if self.theta < 1:
            raise ValueError("theta must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")

    def to_dict(self) -> dict:
        return {
            "magnitudes": list(self.magnitudes),
            "theta": self.theta,
            "delta_min": self.delta_min,
            "sigma": self.sigma,
            "percentile": self.percentile,
        }


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] to uint8, rounding half away from zero."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def dequantize(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def diff_map(image_e: np.ndarray, image_0: np.ndarray) -> np.ndarray:
    """Channel-averaged absolute difference of two uint8 RGB images (0-255 scale)."""
    a = np.asarray(image_e)
    b = np.asarray(image_0)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.abs(a.astype(np.float64) - b.astype(np.float64)).sum(axis=-1) / 3.0


def gaussian_kernel(sigma: float = 3.0) -> np.ndarray:
    """Normalized 1-D Gaussian taps on ``[-ceil(3 sigma), ceil(3 sigma)]``."""
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


@lru_cache(maxsize=16)
def _smoothing_operator(n: int, sigma: float) -> np.ndarray:
    # Row i holds the kernel centred on i, truncated at the border and
    # renormalized so that every row sums to one.
    g = gaussian_kernel(sigma)
    radius = len(g) // 2
    op = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - radius), min(n, i + radius + 1)
        op[i, lo:hi] = g[lo - i + radius:hi - i + radius]
    op /= op.sum(axis=1, keepdims=True)
    op.setflags(write=False)
    return op


def gaussian_smooth(values: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with border renormalization.

    Works on a single map ``(H, W)`` or a stack ``(..., H, W)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    values = np.asarray(values, dtype=np.float64)
    rows = _smoothing_operator(values.shape[-2], float(sigma))
    cols = _smoothing_operator(values.shape[-1], float(sigma))
    return rows @ values @ cols.T


def percentile_nearest_rank(values, p: float = 95.0) -> float:
    """Sorted value at 1-based rank ``ceil(p n / 100)``, no interpolation."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    n = flat.size
    if n == 0:
        raise ValueError("percentile of an empty set")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    rank = math.ceil(Fraction(p) * n / 100)
    return float(np.partition(flat, rank - 1)[rank - 1])


def binarize(smoothed: np.ndarray, delta_min: float = 5.0, p: float = 95.0) -> tuple[np.ndarray, float]:
    """Mask of pixels at or above ``max(percentile_p, delta_min)``."""
    tau = max(percentile_nearest_rank(smoothed, p), float(delta_min))
    return np.asarray(smoothed) >= tau, tau


def majority_vote(masks, theta: int) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        raise ValueError("majority vote over an empty mask list")
    if theta < 1:
        raise ValueError("theta must be >= 1")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("all masks must share one shape")
    return np.sum(masks, axis=0) >= theta


def counterfactual_images(w: np.ndarray, direction: np.ndarray, magnitudes, spec: LatentSpec) -> np.ndarray:
    """uint8 renders of ``w + e * direction`` for every ``e`` in ``magnitudes``."""
    es = np.asarray(list(magnitudes), dtype=np.float64)
    latents = np.asarray(w, dtype=np.float64)[None] + es[:, None, None] * np.asarray(direction)
    return quantize(render_batch(latents, spec))


def counterfactual_image(w: np.ndarray, direction: np.ndarray, e: float, spec: LatentSpec) -> np.ndarray:
    return counterfactual_images(w, direction, [e], spec)[0]


@dataclass
class GroundingResult:
    concept: int
    magnitudes: tuple[float, ...]
    theta: int
    reconstruction: np.ndarray  # uint8 (S, S, 3)
    counterfactuals: np.ndarray  # uint8 (E, S, S, 3)
    diff_maps: np.ndarray  # (E, S, S)
    smoothed: np.ndarray  # (E, S, S)
    thresholds: np.ndarray  # (E,)
    masks: np.ndarray  # bool (E, S, S)
    vote: np.ndarray  # bool (S, S)
    warnings: list[str] = field(default_factory=list)

    @property
    def heat(self) -> np.ndarray:
        """Sum of smoothed maps over the spectrum (for the pointing game)."""
        return self.smoothed.sum(axis=0)

    @property
    def empty_vote(self) -> bool:
        return not self.vote.any()


def ground_from_direction(
    w: np.ndarray,
    direction: np.ndarray,
    spec: LatentSpec,
    spectrum: MagnitudeSpectrum = MagnitudeSpectrum(),
    concept: int = -1,
    warn: bool = True,
) -> GroundingResult:
    """Run the full grounding pipeline for one latent and one unit direction.

    An empty vote is recorded in ``warnings`` and, with ``warn``, also
    raised as a ``RuntimeWarning``.
    """
    w = np.asarray(w, dtype=np.float64)
    recon = quantize(render_batch(w[None], spec))[0]
    cfs = counterfactual_images(w, direction, spectrum.magnitudes, spec)
    diffs = np.stack([diff_map(cf, recon) for cf in cfs])
    smoothed = gaussian_smooth(diffs, spectrum.sigma)
    masks, taus = [], []
    for sm in smoothed:
        m, tau = binarize(sm, spectrum.delta_min, spectrum.percentile)
        masks.append(m)
        taus.append(tau)
    masks = np.stack(masks)
    vote = majority_vote(masks, spectrum.theta)
    notes = []
    if not vote.any():
        msg = f"empty vote for concept {concept}: no pixel reached {spectrum.theta} of {len(masks)} masks"
        notes.append(msg)
        if warn:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return GroundingResult(
        concept=concept,
        magnitudes=spectrum.magnitudes,
        theta=spectrum.theta,
        reconstruction=recon,
        counterfactuals=cfs,
        diff_maps=diffs,
        smoothed=smoothed,
        thresholds=np.asarray(taus),
        masks=masks,
        vote=vote,
        warnings=notes,
    )


def ground_concept(model: BottleneckModel, w: np.ndarray, k: int, spec: LatentSpec,
                   spectrum: MagnitudeSpectrum = MagnitudeSpectrum(), warn: bool = True) -> GroundingResult:
    """Localize concept ``k`` of a bottleneck model in the image rendered from ``w``."""
    d = concept_direction(model, k).direction
    return ground_from_direction(w, d, spec, spectrum, concept=k, warn=warn)


def magnitude_tag(e: float) -> str:
    """File tag for a magnitude: ``+1``, ``-2``, ``+0.5``."""
    return f"{e:+g}"


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend masked pixels 50% toward pure red, rounding half up."""
    out = np.asarray(image, dtype=np.float64).copy()
    m = np.asarray(mask, dtype=bool)
    out[m] = 0.5 * out[m] + 0.5 * np.array([255.0, 0.0, 0.0])
    return np.floor(out + 0.5).astype(np.uint8)


def grounding_summary(result: GroundingResult, spectrum: MagnitudeSpectrum, logit_curve=None, concept_name=None) -> dict:
    return {
        "concept": result.concept,
        "concept_name": concept_name,
        "spectrum": spectrum.to_dict(),
        "theta": result.theta,
        "thresholds": [
            {"e": e, "tau": float(t), "mask_pixels": int(m.sum())}
            for e, t, m in zip(result.magnitudes, result.thresholds, result.masks)
        ],
        "vote_pixels": int(result.vote.sum()),
        "empty_vote": result.empty_vote,
        "warnings": list(result.warnings),
        "logit_curve": None if logit_curve is None else [{"e": e, "logit": z} for e, z in logit_curve],
        "logit_source": "bottleneck on the perturbed latent (not re-encoded)",
    }


def write_grounding(out, result: GroundingResult, spectrum: MagnitudeSpectrum, logit_curve=None, concept_name=None) -> dict:
    """Write the per-(image, concept) artifact directory and return the JSON summary."""
    out = Path(out)
    for e, cf, d, m in zip(result.magnitudes, result.counterfactuals, result.diff_maps, result.masks):
        tag = magnitude_tag(e)
        write_image(out / f"cf_e{tag}.ppm", cf)
        write_image(out / f"diff_e{tag}.pgm", np.clip(np.floor(d + 0.5), 0, 255).astype(np.uint8))
        write_mask(out / f"mask_e{tag}.pgm", m)
    write_mask(out / "vote.pgm", result.vote)
    write_image(out / "overlay.ppm", overlay(result.reconstruction, result.vote))
    summary = grounding_summary(result, spectrum, logit_curve, concept_name)
    write_json(out / "grounding.json", summary)
    return summary
