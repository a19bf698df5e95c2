"""Layered-latent synthetic lesion renderer.

A latent code is an ``N x L`` matrix indexed ``values[dim, layer]``.  Each
render parameter is a fixed squashing of exactly one latent coordinate, and
the layers follow a coarse-to-fine layout:

========  ====  =====================================  =================
layer     dim   parameter                              squashing
========  ====  =====================================  =================
0         0     center x ``cx``                        0.5 + 0.25 tanh
0         1     center y ``cy``                        0.5 + 0.04 tanh
0         2     radius ``r``                           0.18 (1 + 0.1 tanh)
0         3     background level ``b_g``               0.7 + 0.05 tanh
1         0     eccentricity ``ecc``                   0.5 sigmoid
1         1     rotation ``psi``                       (pi/12) tanh
2         0     border wobble amplitude ``a_w``        0.25 sigmoid
2         1     border wobble frequency ``n_w``        5.5 + 2.5 tanh
2         2     border wobble phase ``phi_w``          pi tanh
3         0     streak amplitude ``a_s``               0.4 sigmoid
3         1     streak orientation ``theta_s``         (pi/2) tanh
3         2     streak frequency ``f_s``               8 + 4 tanh
4         0     dot amplitude ``a_d``                  0.5 sigmoid
4         1     dot grid frequency ``f_d``             11 + 5 tanh
5         0..2  lesion tint ``(dR, dG, dB)``           0.1 tanh
5         3     center darkening ``a_c``               0.5 sigmoid
========  ====  =====================================  =================

Frequencies are in cycles per image width.  Everything from layer 2 upward
is multiplied by the soft lesion mask, so fine-layer edits stay inside the
lesion.

The nuisance ranges of layer 0 are kept narrow and each concept has its own
place in the lesion frame.  Eccentricity swells a lobe on the left and the
border wobble bulges the lower rim.  Streaks sit in an upper patch, dots in
a lower-right patch, the tint in a lower-left "veil" patch and the
darkening at the center.  Distinct places and colors keep the concepts
separable for a linear encoder and give each one a compact footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KAPPA = 40.0
SUPPORT_LEVEL = 0.01

SKIN = np.array([1.0, 0.88, 0.78])
LESION_BASE = np.array([0.45, 0.34, 0.28])
STREAK_COLOR = np.array([1.10, 0.95, 0.80])
DOT_COLOR = np.array([-1.00, -1.15, -1.25])  # negative: dots are bright globules
CENTER_COLOR = np.array([0.10, 0.55, 0.70])
TINT_GAIN = np.array([1.0, 1.0, 5.0])
# the blue coordinate also pulls red down (blue shift of the veil)
VEIL_BLUE_SHIFT = np.array([-0.5, 0.0, 1.0])

# lesion-frame layout, offsets and widths in units of the radius
LOBE_EDGE = 0.3
WOBBLE_POWER = 16
WOBBLE_GAIN = 4.0
LOBE_GAIN = 1.5
PATCH_WIDTH = 0.4
CENTER_WIDTH = 0.35
STREAK_OFFSET = (0.0, -0.55)
DOT_OFFSET = (0.4, 0.45)
VEIL_OFFSET = (-0.4, 0.45)

RENDERER_ID = "lesion-v1"

# (layer, dim) coordinates read by lesion-v1
ACTIVE_COORDS = (
    (0, 0), (0, 1), (0, 2), (0, 3),
    (1, 0), (1, 1),
    (2, 0), (2, 1), (2, 2),
    (3, 0), (3, 1), (3, 2),
    (4, 0), (4, 1),
    (5, 0), (5, 1), (5, 2), (5, 3),
)
# the subset that moves the lesion mask; the rest only recolor it
GEOMETRY_COORDS = ((0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2))


@dataclass(frozen=True)
class LatentSpec:
    """Shape of the layered latent and of rendered images."""

    dims_per_layer: int = 8
    num_layers: int = 6
    image_size: int = 64

    def __post_init__(self):
        if self.dims_per_layer < 4:
            raise ValueError("dims_per_layer must be >= 4")
        if self.num_layers != 6:
            raise ValueError(f"renderer {RENDERER_ID} needs num_layers == 6")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.dims_per_layer, self.num_layers)

    @property
    def size(self) -> int:
        return self.dims_per_layer * self.num_layers

    def to_dict(self) -> dict:
        return {
            "dims_per_layer": self.dims_per_layer,
            "num_layers": self.num_layers,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSpec":
        return cls(**d)


@dataclass(frozen=True)
class Concept:
    name: str
    layer: int
    dim: int
    rule: str = "coordinate > 0"


@dataclass(frozen=True)
class ConceptVocab:
    concepts: tuple[Concept, ...] = field(
        default_factory=lambda: (
            Concept("asymmetry", 1, 0),
            Concept("irregular_border", 2, 0),
            Concept("streaks", 3, 0),
            Concept("dots", 4, 0),
            Concept("dark_center", 5, 3),
            Concept("blue_tint", 5, 2),
        )
    )

    def __len__(self):
        return len(self.concepts)

    def __getitem__(self, k):
        return self.concepts[k]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def index(self, key) -> int:
        """Resolve a concept name or integer index (also as a string)."""
        if isinstance(key, (int, np.integer)):
            k = int(key)
        elif isinstance(key, str) and key.lstrip("-").isdigit():
            k = int(key)
        else:
            try:
                return self.names.index(key)
            except ValueError:
                raise KeyError(f"unknown concept {key!r}") from None
        if not 0 <= k < len(self):
            raise KeyError(f"concept index {k} out of range")
        return k

    def to_list(self) -> list[dict]:
        return [
            {"id": i, "name": c.name, "layer": c.layer, "dim": c.dim, "rule": c.rule}
            for i, c in enumerate(self.concepts)
        ]

    @classmethod
    def from_list(cls, items: list[dict]) -> "ConceptVocab":
        return cls(tuple(Concept(d["name"], d["layer"], d["dim"], d.get("rule", "coordinate > 0")) for d in items))


DEFAULT_VOCAB = ConceptVocab()


@dataclass(frozen=True)
class RenderParams:
    cx: float
    cy: float
    radius: float
    background: float
    ecc: float
    rotation: float
    wobble_amp: float
    wobble_freq: float
    wobble_phase: float
    streak_amp: float
    streak_angle: float
    streak_freq: float
    dot_amp: float
    dot_freq: float
    tint: tuple[float, float, float]
    center_dark: float


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sample_latent(spec: LatentSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw standard-normal latent codes; ``n`` adds a leading batch axis."""
    shape = spec.shape if n is None else (n, *spec.shape)
    return rng.standard_normal(shape)


def _param_arrays(w: np.ndarray) -> dict:
    # w: (B, N, L); indexing is w[:, dim, layer]
    def c(layer, dim):
        return w[:, dim, layer]

    return {
        "cx": 0.5 + 0.25 * np.tanh(c(0, 0)),
        "cy": 0.5 + 0.04 * np.tanh(c(0, 1)),
        "radius": 0.18 * (1.0 + 0.1 * np.tanh(c(0, 2))),
        "background": 0.7 + 0.05 * np.tanh(c(0, 3)),
        "ecc": 0.5 * _sigmoid(c(1, 0)),
        "rotation": np.pi / 12 * np.tanh(c(1, 1)),
        "wobble_amp": 0.25 * _sigmoid(c(2, 0)),
        "wobble_freq": 5.5 + 2.5 * np.tanh(c(2, 1)),
        "wobble_phase": np.pi * np.tanh(c(2, 2)),
        "streak_amp": 0.4 * _sigmoid(c(3, 0)),
        "streak_angle": 0.5 * np.pi * np.tanh(c(3, 1)),
        "streak_freq": 8.0 + 4.0 * np.tanh(c(3, 2)),
        "dot_amp": 0.5 * _sigmoid(c(4, 0)),
        "dot_freq": 11.0 + 5.0 * np.tanh(c(4, 1)),
        "tint": 0.1 * np.tanh(np.stack([c(5, 0), c(5, 1), c(5, 2)], axis=-1)),
        "center_dark": 0.5 * _sigmoid(c(5, 3)),
    }


def derive_params(w: np.ndarray) -> RenderParams:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("latent code has non-finite entries")
    p = _param_arrays(w[None])
    return RenderParams(
        **{k: float(v[0]) for k, v in p.items() if k != "tint"},
        tint=tuple(float(t) for t in p["tint"][0]),
    )


def _axis(size: int) -> np.ndarray:
    return (np.arange(size) + 0.5) / size


def _geometry(p: dict, size: int):
    # dx varies along columns (B, 1, S), dy along rows (B, S, 1).  The mask is
    # evaluated with in-place operations and per-image constants folded in;
    # this is the hot loop of finite-difference inversion.
    t = _axis(size)
    dx = t[None, None, :] - p["cx"][:, None, None]
    dy = t[None, :, None] - p["cy"][:, None, None]
    col = lambda a: a[:, None, None]  # noqa: E731
    r = p["radius"]
    cos_r, sin_r = col(np.cos(p["rotation"])), col(np.sin(p["rotation"]))
    u = dx * cos_r + dy * sin_r
    v = dy * cos_r - dx * sin_r
    v2 = v * v

    # one-sided eccentricity: stretch = 1 + g ecc sigmoid(-u / (edge r)), only the -u half swells
    half_lobe = 0.5 * LOBE_GAIN * p["ecc"]
    stretch = np.tanh(u * col(-0.5 / (LOBE_EDGE * r)))
    stretch *= col(half_lobe)
    stretch += col(1.0 + half_lobe)
    dist = np.divide(u, stretch, out=stretch)
    dist *= dist
    dist += v2
    np.sqrt(dist, out=dist)

    # angle from the +v axis, theta = atan2(-u, v): the wobble sits on the lower
    # side and its window cos(theta/2)^P vanishes at +-pi, which hides the
    # seam of non-integer frequencies.  cos(theta/2)^2 = (1 + v / rho) / 2.
    rho = u * u
    rho += v2
    np.sqrt(rho, out=rho)
    window = np.divide(v, rho, out=np.ones_like(rho), where=rho > 0)
    window += 1.0
    window *= 0.5
    for _ in range(WOBBLE_POWER.bit_length() - 2):
        window *= window
    # outward-only lobes 0.5 (1 + sin(n theta + phi)), so a larger amplitude only grows the border
    lobes = np.arctan2(u, v)
    lobes *= col(-p["wobble_freq"])
    lobes += col(p["wobble_phase"])
    np.sin(lobes, out=lobes)
    lobes += 1.0

    # mask = sigmoid(kappa (r (1 + wobble) - dist)), wobble = gain a_w window lobes / 2
    z = np.multiply(window, lobes, out=window)
    z *= col(0.25 * KAPPA * WOBBLE_GAIN * p["wobble_amp"] * r)
    z += col(0.5 * KAPPA * r)
    dist *= 0.5 * KAPPA
    z -= dist
    np.tanh(z, out=z)
    z += 1.0
    z *= 0.5
    return dx, dy, z


def _patch_center(p: dict, offset: tuple[float, float]):
    # lesion-frame offset (in radii) -> image-frame center
    ou, ov = offset
    r, rot = p["radius"], p["rotation"]
    px = p["cx"] + r * (ou * np.cos(rot) - ov * np.sin(rot))
    py = p["cy"] + r * (ou * np.sin(rot) + ov * np.cos(rot))
    return px[:, None, None], py[:, None, None]


def _envelope(p: dict, offset, width: float, size: int):
    t = _axis(size)
    px, py = _patch_center(p, offset)
    two_var = 2.0 * (width * p["radius"][:, None, None]) ** 2
    ex = np.exp(-((t[None, None, :] - px) ** 2) / two_var)
    ey = np.exp(-((t[None, :, None] - py) ** 2) / two_var)
    return ex, ey, px, py


def lesion_mask(w: np.ndarray, spec: LatentSpec) -> np.ndarray:
    """Soft lesion membership in [0, 1] for every pixel (S x S)."""
    w = np.asarray(w, dtype=np.float64)
    _, _, mask = _geometry(_param_arrays(w[None]), spec.image_size)
    return mask[0]


def lesion_support(w: np.ndarray, spec: LatentSpec, level: float = SUPPORT_LEVEL) -> np.ndarray:
    """Pixels whose soft lesion membership exceeds ``level``."""
    return lesion_mask(w, spec) > level


def render_batch(w: np.ndarray, spec: LatentSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """Render a batch ``(B, N, L)`` of latents to float images ``(B, S, S, 3)``.

    ``mask`` optionally supplies a precomputed lesion mask ``(S, S)`` shared by
    the whole batch.  It is only valid when every latent agrees with the one
    the mask came from on ``GEOMETRY_COORDS``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 3 or w.shape[1:] != spec.shape:
        raise ValueError(f"expected latents of shape (B, {spec.shape[0]}, {spec.shape[1]}), got {w.shape}")
    p = _param_arrays(w)
    size = spec.image_size
    t = _axis(size)
    col = lambda a: a[:, None, None]  # noqa: E731
    if mask is None:
        _, _, mask = _geometry(p, size)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (len(w), size, size))

    # streak patch 0.5 (1 + cos(a + b)) e, with a and b separable along the axes
    ex, ey, px, py = _envelope(p, STREAK_OFFSET, PATCH_WIDTH, size)
    k = 2.0 * np.pi * col(p["streak_freq"])
    a = k * (t[None, None, :] - px) * np.cos(col(p["streak_angle"]))
    b = k * (t[None, :, None] - py) * np.sin(col(p["streak_angle"]))
    ex = 0.5 * ex
    streaks = ex * ey + (np.cos(a) * ex) * (np.cos(b) * ey) - (np.sin(a) * ex) * (np.sin(b) * ey)

    # diagonal lattice of bumps: 0.5 (1 + cos(x) cos(y)) e
    ex, ey, px, py = _envelope(p, DOT_OFFSET, PATCH_WIDTH, size)
    fd = np.pi * col(p["dot_freq"])
    ex = 0.5 * ex
    dots = ex * ey + (np.cos(fd * (t[None, None, :] - px)) * ex) * (np.cos(fd * (t[None, :, None] - py)) * ey)

    ex, ey, _, _ = _envelope(p, (0.0, 0.0), CENTER_WIDTH, size)
    center = ex * ey
    ex, ey, _, _ = _envelope(p, VEIL_OFFSET, PATCH_WIDTH, size)
    veil = ex * ey

    # out = bg + mask (lesion - bg), lesion = base + sum_j amplitude_j color_j pattern_j
    tint = p["tint"]
    bg = np.outer(p["background"], SKIN)
    coef = np.stack(
        [
            TINT_GAIN * (tint + VEIL_BLUE_SHIFT * tint[:, 2:3] * np.array([1.0, 1.0, 0.0])),
            -np.outer(p["streak_amp"], STREAK_COLOR),
            -np.outer(p["dot_amp"], DOT_COLOR),
            -np.outer(p["center_dark"], CENTER_COLOR),
        ],
        axis=1,
    )  # (B, 4, 3)
    offset = LESION_BASE - bg
    out = np.empty((*mask.shape, 3))
    for ch in range(3):
        lesion = col(coef[:, 0, ch]) * veil
        lesion += col(offset[:, ch])
        for j, pattern in enumerate((streaks, dots, center), start=1):
            lesion += col(coef[:, j, ch]) * pattern
        lesion *= mask
        lesion += col(bg[:, ch])
        out[..., ch] = lesion
    return np.clip(out, 0.0, 1.0, out=out)


def render(w: np.ndarray, spec: LatentSpec) -> np.ndarray:
    """Render one latent code to an ``S x S x 3`` float image in [0, 1]."""
    return render_batch(np.asarray(w, dtype=np.float64)[None], spec)[0]


def true_concepts(w: np.ndarray, vocab: ConceptVocab = DEFAULT_VOCAB) -> np.ndarray:
    """Binary concept labels; concept k is on iff its coordinate is > 0.

    Accepts a single code ``(N, L)`` or a batch ``(B, N, L)``.
    """
    w = np.asarray(w)
    idx_dim = [c.dim for c in vocab.concepts]
    idx_layer = [c.layer for c in vocab.concepts]
    return (w[..., idx_dim, idx_layer] > 0).astype(np.uint8)
