"""Synthetic datasets with known latents, labels and oracle grounding masks.

On-disk layout::

    manifest.json         seed, spec, vocabulary, counts, checksums, format version
    latents.gct           float32 (M, N, L)
    images/NNNNN.ppm      uint8 renders
    concepts.csv          image_id then one 0/1 column per concept
    tasks.csv             image_id,task
    oracle_masks/kK_NNNNN.pgm   written on demand

The first ``train`` indices form the training split, the rest the test split.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bottleneck import task_rule
from .formats import (
    FormatError,
    atomic_write_bytes,
    read_image,
    read_json,
    read_mask,
    read_tensor,
    write_image,
    write_json,
    write_mask,
    write_tensor,
)
from .grounding import diff_map, gaussian_smooth, quantize
from .renderer import DEFAULT_VOCAB, RENDERER_ID, ConceptVocab, LatentSpec, render_batch, sample_latent, true_concepts

DATASET_FORMAT = "gencbm-dataset/1"
ORACLE_LEVEL = 1.5
ORACLE_EPS = 2.0


def oracle_masks_batch(k: int, latents: np.ndarray, spec: LatentSpec, vocab: ConceptVocab = DEFAULT_VOCAB,
                       eps_gt: float = ORACLE_EPS, sigma: float = 3.0) -> np.ndarray:
    """Ground-truth footprint of concept ``k`` for a batch of latents ``(B, N, L)``.

    The controlling coordinate is set to -1.5 and to +1.5 with everything
    else fixed; the smoothed 8-bit difference of the two renders is
    thresholded strictly at ``eps_gt``.
    """
    c = vocab[k]
    latents = np.asarray(latents, dtype=np.float64)
    lo = latents.copy()
    hi = latents.copy()
    lo[:, c.dim, c.layer] = -ORACLE_LEVEL
    hi[:, c.dim, c.layer] = ORACLE_LEVEL
    a = quantize(render_batch(lo, spec))
    b = quantize(render_batch(hi, spec))
    return gaussian_smooth(diff_map(b, a), sigma) > eps_gt


def oracle_mask(k: int, w: np.ndarray, spec: LatentSpec, vocab: ConceptVocab = DEFAULT_VOCAB,
                eps_gt: float = ORACLE_EPS, sigma: float = 3.0) -> np.ndarray:
    return oracle_masks_batch(k, np.asarray(w)[None], spec, vocab, eps_gt, sigma)[0]


@dataclass
class SynthDataset:
    latents: np.ndarray  # (M, N, L)
    images: np.ndarray  # uint8 (M, S, S, 3)
    concept_labels: np.ndarray  # uint8 (M, K)
    task_labels: np.ndarray  # uint8 (M,)
    manifest: dict

    @property
    def spec(self) -> LatentSpec:
        return LatentSpec.from_dict(self.manifest["spec"])

    @property
    def vocab(self) -> ConceptVocab:
        return ConceptVocab.from_list(self.manifest["vocabulary"])

    @property
    def train_ids(self) -> np.ndarray:
        return np.arange(self.manifest["counts"]["train"])

    @property
    def test_ids(self) -> np.ndarray:
        n = self.manifest["counts"]["train"]
        return np.arange(n, n + self.manifest["counts"]["test"])

    def mean_latent(self) -> np.ndarray:
        return self.latents[self.train_ids].mean(axis=0)

    def __len__(self):
        return len(self.latents)


def build_dataset(seed: int, spec: LatentSpec = LatentSpec(), train: int = 2000, test: int = 500,
                  vocab: ConceptVocab = DEFAULT_VOCAB, k_min: int = 2, batch: int = 250) -> SynthDataset:
    """Sample, render and label a dataset in memory.

    Latents are rounded to float32 before rendering, so the stored latents
    are exactly the ones that produced the images and labels.
    """
    if train < 1 or test < 0:
        raise ValueError("need train >= 1 and test >= 0")
    rng = np.random.default_rng(seed)
    m = train + test
    latents = sample_latent(spec, rng, m).astype(np.float32).astype(np.float64)
    images = np.empty((m, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    for i in range(0, m, batch):
        images[i:i + batch] = quantize(render_batch(latents[i:i + batch], spec))
    concepts = true_concepts(latents, vocab)
    manifest = {
        "format": DATASET_FORMAT,
        "seed": int(seed),
        "renderer": RENDERER_ID,
        "spec": spec.to_dict(),
        "vocabulary": vocab.to_list(),
        "counts": {"train": train, "test": test, "total": m},
        "task_rule": {"k_min": k_min},
        "oracle": {"level": ORACLE_LEVEL, "eps_gt": ORACLE_EPS, "sigma": 3.0},
    }
    return SynthDataset(latents, images, concepts, task_rule(concepts, k_min), manifest)


def _csv(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for i, row in enumerate(rows):
        buf.write(",".join([str(i)] + [str(int(v)) for v in np.atleast_1d(row)]) + "\n")
    return buf.getvalue().encode("ascii")


def _read_csv(path, header: list[str]) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0].split(",") != header:
        raise FormatError(f"{path}: unexpected header")
    rows = [line.split(",") for line in lines[1:]]
    for i, r in enumerate(rows):
        if len(r) != len(header) or r[0] != str(i) or any(v not in ("0", "1") for v in r[1:]):
            raise FormatError(f"{path}: malformed row {i}")
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.uint8).reshape(len(rows), len(header) - 1)


def image_name(i: int) -> str:
    return f"{i:05d}"


def write_dataset(ds: SynthDataset, out) -> Path:
    """Write every file of the layout; the manifest goes last and carries checksums."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_tensor(out / "latents.gct", ds.latents)
    for i, img in enumerate(ds.images):
        write_image(out / "images" / f"{image_name(i)}.ppm", img)
    names = [c["name"] for c in ds.manifest["vocabulary"]]
    concepts_csv = _csv(["image_id", *names], ds.concept_labels)
    tasks_csv = _csv(["image_id", "task"], ds.task_labels)
    atomic_write_bytes(out / "concepts.csv", concepts_csv)
    atomic_write_bytes(out / "tasks.csv", tasks_csv)
    h = hashlib.sha256()
    for img in ds.images:
        h.update(img.tobytes())
    manifest = dict(ds.manifest)
    manifest["checksums"] = {
        "latents.gct": hashlib.sha256((out / "latents.gct").read_bytes()).hexdigest(),
        "images": h.hexdigest(),
        "concepts.csv": hashlib.sha256(concepts_csv).hexdigest(),
        "tasks.csv": hashlib.sha256(tasks_csv).hexdigest(),
    }
    write_json(out / "manifest.json", manifest)
    ds.manifest = manifest
    return out


def generate_dataset(out, seed: int = 42, spec: LatentSpec = LatentSpec(), train: int = 2000, test: int = 500,
                     vocab: ConceptVocab = DEFAULT_VOCAB, k_min: int = 2) -> SynthDataset:
    ds = build_dataset(seed, spec, train, test, vocab, k_min)
    write_dataset(ds, out)
    return ds


def load_dataset(path) -> SynthDataset:
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path} is not a {DATASET_FORMAT} directory")
    spec = LatentSpec.from_dict(manifest["spec"])
    m = manifest["counts"]["total"]
    latents = read_tensor(path / "latents.gct", np.float32).astype(np.float64)
    if latents.shape != (m, *spec.shape):
        raise FormatError("latents.gct does not match the manifest")
    images = np.stack([read_image(path / "images" / f"{image_name(i)}.ppm") for i in range(m)])
    names = [c["name"] for c in manifest["vocabulary"]]
    concepts = _read_csv(path / "concepts.csv", ["image_id", *names])
    tasks = _read_csv(path / "tasks.csv", ["image_id", "task"])[:, 0]
    if len(concepts) != m or len(tasks) != m:
        raise FormatError("label files do not match the manifest count")
    sums = manifest.get("checksums")
    if sums is not None:
        h = hashlib.sha256()
        for img in images:
            h.update(img.tobytes())
        found = {name: hashlib.sha256((path / name).read_bytes()).hexdigest()
                 for name in ("latents.gct", "concepts.csv", "tasks.csv")}
        found["images"] = h.hexdigest()
        bad = sorted(k for k, v in found.items() if sums.get(k) != v)
        if bad:
            raise FormatError(f"checksum mismatch for {bad}")
    return SynthDataset(latents, images, concepts, tasks, manifest)


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path, "manifest.json").read_bytes()).hexdigest()


def oracle_mask_path(root, k: int, i: int) -> Path:
    return Path(root) / "oracle_masks" / f"k{k}_{image_name(i)}.pgm"


def ensure_oracle_mask(root, ds: SynthDataset, k: int, i: int) -> np.ndarray:
    """Read a cached oracle mask or compute and store it."""
    p = oracle_mask_path(root, k, i)
    if p.exists():
        return read_mask(p)
    mask = oracle_mask(k, ds.latents[i], ds.spec, ds.vocab)
    write_mask(p, mask)
    return mask
