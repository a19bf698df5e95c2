"""Concept and grounding metrics, and end-to-end evaluation runs.

Degenerate cases follow fixed conventions so that any two implementations
agree exactly: precision or recall with a zero denominator is 0, the IoU of
two empty masks is 1, and the pointing game skips cases with an empty
ground-truth mask.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bottleneck import BottleneckModel, counterfactual_logit_curve, predict_concepts, task_rule
from .dataset import SynthDataset, oracle_masks_batch
from .formats import dumps_json, write_json
from .grounding import MagnitudeSpectrum, ground_concept, write_grounding
from .inversion import LossWeights, RegressionEncoder, encode, invert_optimize

log = logging.getLogger(__name__)

REPORT_FORMAT = "gencbm-report/1"


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass(frozen=True)
class ConceptMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray  # positives in the ground truth
    names: tuple[str, ...] = ()

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def to_dict(self) -> dict:
        names = self.names or tuple(str(k) for k in range(len(self.f1)))
        return {
            "per_concept": {
                n: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                for n, p, r, f, s in zip(names, self.precision, self.recall, self.f1, self.support)
            },
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
        }


def concept_metrics(pred, gt, names=()) -> ConceptMetrics:
    """Per-concept precision, recall and F1 from binary ``(M, K)`` matrices."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 1:
        pred, gt = pred[:, None], gt[:, None]
    tp = (pred & gt).sum(axis=0)
    fp = (pred & ~gt).sum(axis=0)
    fn = (~pred & gt).sum(axis=0)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = _ratio(2 * p * r, p + r)
    return ConceptMetrics(p, r, f1, tp + fn, tuple(names))


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pointing_game(heat, gt) -> bool | None:
    """Whether the heat maximum (first in row-major order on ties) hits ``gt``.

    Returns ``None`` when ``gt`` is empty: such cases are skipped, not failed.
    """
    heat = np.asarray(heat)
    gt = np.asarray(gt, dtype=bool)
    if heat.shape != gt.shape:
        raise ValueError(f"shape mismatch: {heat.shape} vs {gt.shape}")
    if not gt.any():
        return None
    return bool(gt.ravel()[int(np.argmax(heat))])


@dataclass
class GroundingMetrics:
    names: tuple[str, ...]
    ious: list[list[float]]
    hits: list[list[bool]]
    skipped: list[int]
    empty_votes: list[int]

    def to_dict(self) -> dict:
        per = {}
        for k, name in enumerate(self.names):
            n = len(self.ious[k])
            per[name] = {
                "evaluated": n,
                "mean_iou": float(np.mean(self.ious[k])) if n else None,
                "pointing_accuracy": float(np.mean(self.hits[k])) if self.hits[k] else None,
                "pointing_skipped": self.skipped[k],
                "empty_votes": self.empty_votes[k],
                "empty_vote_rate": self.empty_votes[k] / n if n else None,
            }
        total = sum(len(x) for x in self.ious)
        return {
            "per_concept": per,
            "evaluated": total,
            "empty_votes": int(sum(self.empty_votes)),
            "empty_vote_rate": sum(self.empty_votes) / total if total else None,
        }


def encode_images(mode: str, ds: SynthDataset, ids, encoder: RegressionEncoder | None = None,
                  weights: LossWeights = LossWeights(), steps: int = 300, lr: float = 0.5,
                  momentum: float = 0.9) -> np.ndarray:
    """Latents for dataset images ``ids`` under one encoder mode."""
    ids = np.asarray(ids, dtype=int)
    if mode == "oracle":
        return ds.latents[ids].copy()
    if mode == "regression":
        if encoder is None:
            raise ValueError("regression mode needs a fitted encoder")
        return encode(encoder, ds.images[ids]) if len(ids) else np.empty((0, *ds.spec.shape))
    if mode == "optimize":
        w_bar = ds.mean_latent()
        out = np.empty((len(ids), *ds.spec.shape))
        for j, i in enumerate(ids):
            img = ds.images[i].astype(np.float64) / 255.0
            out[j] = invert_optimize(img, ds.spec, weights, steps, lr, momentum, mean_latent=w_bar).latent
        return out
    raise ValueError(f"unknown encoder mode {mode!r}")


def model_hash(model: BottleneckModel) -> str:
    h = hashlib.sha256()
    h.update(dumps_json({"concept_names": list(model.concept_names), "shape": list(model.A.shape)}).encode())
    for name, arr in model.params().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def evaluate_run(model: BottleneckModel, encoder_mode: str, ds: SynthDataset,
                 spectrum: MagnitudeSpectrum = MagnitudeSpectrum(), sample_cap: int = 50,
                 out=None, encoder: RegressionEncoder | None = None, config: dict | None = None,
                 max_test_images: int | None = None, write_cases: bool = True) -> dict:
    """Encode the test split, score concepts and the task rule, ground true positives.

    Grounding takes the first ``sample_cap`` true-positive images per concept
    in image-id order.  With ``out`` set, ``report.json``, ``timings.json``
    and ``cases/{image_id}/{concept}/`` are written.  The report holds no
    wall-clock values and no host paths, so identical runs give identical
    bytes wherever they write.
    """
    if sample_cap < 0:
        raise ValueError("sample_cap must be >= 0")
    t0 = time.perf_counter()
    timings = {}
    spec, vocab = ds.spec, ds.vocab
    ids = ds.test_ids if max_test_images is None else ds.test_ids[:max_test_images]
    cfg = config or {}
    enc_cfg = cfg.get("encoder", {})
    latents = encode_images(
        encoder_mode, ds, ids, encoder,
        steps=enc_cfg.get("steps", 300), lr=enc_cfg.get("lr", 0.5), momentum=enc_cfg.get("momentum", 0.9),
    )
    timings["encode_s"] = time.perf_counter() - t0

    gt = ds.concept_labels[ids]
    pred = predict_concepts(model, latents) if len(ids) else np.zeros_like(gt)
    k_min = ds.manifest.get("task_rule", {}).get("k_min", 2)
    task_pred = task_rule(pred, k_min)
    cm = concept_metrics(pred, gt, vocab.names)

    t1 = time.perf_counter()
    issues = []
    K = len(vocab)
    gm = GroundingMetrics(tuple(vocab.names), [[] for _ in range(K)], [[] for _ in range(K)], [0] * K, [0] * K)
    for k in range(K):
        rows = np.where((pred[:, k] == 1) & (gt[:, k] == 1))[0][:sample_cap]
        if len(rows) == 0:
            continue
        oracles = oracle_masks_batch(k, ds.latents[ids[rows]], spec, vocab)
        for j, row in enumerate(rows):
            image_id = int(ids[row])
            try:
                result = ground_concept(model, latents[row], k, spec, spectrum, warn=False)
            except ValueError as exc:
                issues.append({"image_id": image_id, "concept": vocab.names[k], "error": str(exc)})
                continue
            gm.ious[k].append(iou(result.vote, oracles[j]))
            hit = pointing_game(result.heat, oracles[j])
            if hit is None:
                gm.skipped[k] += 1
            else:
                gm.hits[k].append(hit)
            gm.empty_votes[k] += int(result.empty_vote)
            if out is not None and write_cases:
                curve = counterfactual_logit_curve(model, latents[row], k, spectrum.magnitudes)
                write_grounding(Path(out, "cases", f"{image_id:05d}", vocab.names[k]), result, spectrum, curve, vocab.names[k])
    timings["grounding_s"] = time.perf_counter() - t1

    report = {
        "format_version": REPORT_FORMAT,
        "dataset_manifest_hash": hashlib.sha256(dumps_json(ds.manifest).encode()).hexdigest(),
        "encoder_mode": encoder_mode,
        "model_config_hash": model_hash(model),
        "config": {k: v for k, v in cfg.items() if k != "paths"},
        "test_images": len(ids),
        "sample_cap": sample_cap,
        "spectrum": spectrum.to_dict(),
        "concept_metrics": cm.to_dict(),
        "grounding_metrics": gm.to_dict(),
        "task_accuracy": float(np.mean(task_pred == ds.task_labels[ids])) if len(ids) else None,
        "issues": issues,
        "timings": "timings.json",
    }
    timings["total_s"] = time.perf_counter() - t0
    if out is not None:
        write_json(Path(out, "report.json"), report)
        write_json(Path(out, "timings.json"), timings)
    log.info("evaluation done: macro-F1 %.3f", cm.macro_f1)
    return report
