"""Saving and loading trained bottlenecks and regression encoders.

Each artifact is a directory of GCT1 tensors plus a JSON sidecar.  Tensors are
stored as float32, so a loaded artifact is the float32 rounding of the one
that was saved; everything downstream of a load is computed from the file.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .bottleneck import BottleneckModel
from .formats import FormatError, read_json, read_tensor, write_json, write_tensor
from .inversion import FEATURE_LAYOUT, RegressionEncoder
from .renderer import LatentSpec

MODEL_FORMAT = "gencbm-model/1"
ENCODER_FORMAT = "gencbm-encoder/1"


def save_model(path, model: BottleneckModel, meta: dict | None = None) -> None:
    path = Path(path)
    for name, arr in model.params().items():
        write_tensor(path / f"{name}.gct", arr)
    sidecar = {
        "format": MODEL_FORMAT,
        "dims_per_layer": model.dims_per_layer,
        "num_layers": model.num_layers,
        "feature_dim": model.feature_dim,
        "concept_names": list(model.concept_names),
    }
    sidecar.update(meta or {})
    write_json(path / "model.json", sidecar)


def load_model(path) -> tuple[BottleneckModel, dict]:
    path = Path(path)
    meta = read_json(path / "model.json")
    if meta.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path} is not a {MODEL_FORMAT} directory")
    arrs = {k: read_tensor(path / f"{k}.gct", np.float32).astype(np.float64) for k in ("A", "b", "V", "c")}
    model = BottleneckModel(concept_names=list(meta["concept_names"]), **arrs)
    if (model.dims_per_layer, model.num_layers, model.feature_dim) != (
        meta["dims_per_layer"],
        meta["num_layers"],
        meta["feature_dim"],
    ):
        raise FormatError("model tensors disagree with the sidecar")
    return model, meta


def save_encoder(path, enc: RegressionEncoder) -> None:
    path = Path(path)
    write_tensor(path / "weights.gct", enc.weights)
    write_tensor(path / "bias.gct", enc.bias)
    write_json(
        path / "encoder.json",
        {
            "format": ENCODER_FORMAT,
            "ridge": enc.ridge,
            "spec": enc.spec.to_dict(),
            "feature_layout": FEATURE_LAYOUT,
            "train_mse": enc.train_mse,
        },
    )


def load_encoder(path) -> RegressionEncoder:
    path = Path(path)
    meta = read_json(path / "encoder.json")
    if meta.get("format") != ENCODER_FORMAT:
        raise FormatError(f"{path} is not a {ENCODER_FORMAT} directory")
    if meta.get("feature_layout") != FEATURE_LAYOUT:
        raise FormatError(f"encoder feature layout {meta.get('feature_layout')!r} is not {FEATURE_LAYOUT!r}")
    w = read_tensor(path / "weights.gct", np.float32).astype(np.float64)
    b = read_tensor(path / "bias.gct", np.float32).astype(np.float64)
    return RegressionEncoder(w, b, LatentSpec.from_dict(meta["spec"]), meta["ridge"], meta["train_mse"], {"feature_layout": FEATURE_LAYOUT})
