"""Command-line interface: ``gencbm <subcommand> [flags]``.

Exit codes are 0 on success, 1 on usage errors (usage text goes to stderr)
and 2 on runtime errors.  Every command that writes a directory also writes
the fully materialized ``config.json`` that reproduces it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bottleneck import counterfactual_logit_curve, forward, init_model, task_rule, train
from .config import ConfigError, RunConfig, load_config
from .dataset import ensure_oracle_mask, generate_dataset, load_dataset, oracle_mask, oracle_mask_path
from .evaluation import encode_images, evaluate_run
from .formats import FormatError, write_image, write_json, write_mask, write_tensor
from .grounding import ground_concept, quantize, write_grounding
from .inversion import fit_encoder_on_images, invert_optimize
from .renderer import render
from .store import load_encoder, load_model, save_encoder, save_model

log = logging.getLogger("gencbm")

COMMANDS = ("gen-data", "fit-encoder", "train-cbm", "predict", "ground", "evaluate", "oracle-mask", "reconstruct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gencbm", description="Generative concept bottleneck on a synthetic layered-latent renderer.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")

    def add(name, help, required=(), optional=()):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, help="run config JSON")
        flags = {
            "out": dict(type=Path, help="output directory"),
            "seed": dict(type=_u64, help="random seed (unsigned 64-bit)"),
            "data": dict(type=Path, help="dataset directory"),
            "model": dict(type=Path, help="trained model directory"),
            "encoder": dict(help="regression encoder directory, 'oracle' or 'optimize'"),
            "image-id": dict(type=_nonneg, help="dataset image index"),
            "concept": dict(help="concept name or index"),
            "magnitudes": dict(type=_csv_floats, help="comma-separated perturbation magnitudes"),
            "theta": dict(type=int, help="vote threshold"),
            "cap": dict(type=_nonneg, help="true-positive cases grounded per concept"),
        }
        for f in required:
            sp.add_argument(f"--{f}", required=True, **flags[f])
        for f in optional:
            sp.add_argument(f"--{f}", **flags[f])
        return sp

    add("gen-data", "render a synthetic dataset", ["out"], ["seed"])
    add("fit-encoder", "fit the ridge regression encoder", ["data", "out"], [])
    add("train-cbm", "train the concept bottleneck", ["data", "out"], ["encoder", "seed"])
    add("predict", "predict concepts and the task label for one image", ["model", "data", "image-id"], ["encoder", "out"])
    add("ground", "ground one concept in one image", ["model", "data", "image-id", "concept"],
        ["encoder", "out", "magnitudes", "theta"])
    add("evaluate", "score a model on the test split", ["model", "data"], ["encoder", "out", "cap", "magnitudes", "theta", "seed"])
    add("oracle-mask", "write the oracle grounding mask of one image", ["data", "image-id", "concept"], ["out"])
    add("reconstruct", "invert one image and write its reconstruction", ["data", "image-id", "out"], ["encoder"])
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    spectrum = cfg.spectrum
    if getattr(args, "magnitudes", None) is not None:
        spectrum = replace(spectrum, magnitudes=args.magnitudes)
    if getattr(args, "theta", None) is not None:
        spectrum = replace(spectrum, theta=args.theta)
    cfg = replace(cfg, spectrum=spectrum)
    if getattr(args, "cap", None) is not None:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, sample_cap=args.cap))
    enc = getattr(args, "encoder", None)
    if enc is not None:
        mode = enc if enc in ("oracle", "optimize") else "regression"
        cfg = replace(cfg, encoder=replace(cfg.encoder, mode=mode))
    paths = {k: str(getattr(args, k)) for k in ("data", "model", "out") if getattr(args, k, None) is not None}
    if enc not in (None, "oracle", "optimize"):
        paths["encoder"] = enc
    return replace(cfg, paths=replace(cfg.paths, **paths))


def _encoder_for(args, cfg: RunConfig):
    enc = getattr(args, "encoder", None)
    if enc is None:
        if cfg.encoder.mode != "regression":
            return cfg.encoder.mode, None
        if cfg.paths.encoder is None:
            raise UsageError("regression mode needs --encoder PATH or paths.encoder in the config\n")
        return "regression", load_encoder(cfg.paths.encoder)
    if enc in ("oracle", "optimize"):
        return enc, None
    return "regression", load_encoder(enc)


def _check_image(ds, i: int) -> int:
    if not 0 <= i < len(ds):
        raise UsageError(f"--image-id {i} out of range (dataset has {len(ds)} images)\n")
    return i


def _concept(ds, key) -> int:
    try:
        return ds.vocab.index(key)
    except KeyError as exc:
        raise UsageError(f"--concept: {exc.args[0]}\n") from None


def _latent(args, cfg, ds, i):
    mode, encoder = _encoder_for(args, cfg)
    e = cfg.encoder
    return mode, encode_images(mode, ds, [i], encoder, cfg.loss_weights, e.steps, e.lr, e.momentum)[0]


def cmd_gen_data(args, cfg):
    out = args.out
    ds = generate_dataset(out, cfg.seed, cfg.spec, cfg.data.train, cfg.data.test, k_min=cfg.data.k_min)
    write_json(out / "config.json", cfg.to_dict())
    print(json.dumps({"out": str(out), "images": len(ds), "task_prevalence": float(ds.task_labels.mean())}))


def cmd_fit_encoder(args, cfg):
    ds = load_dataset(args.data)
    tr = ds.train_ids
    enc = fit_encoder_on_images(ds.images[tr], ds.latents[tr], ds.spec, cfg.encoder.ridge)
    save_encoder(args.out, enc)
    write_json(args.out / "config.json", cfg.to_dict())
    print(json.dumps({"out": str(args.out), "train_mse": enc.train_mse}))


def cmd_train_cbm(args, cfg):
    ds = load_dataset(args.data)
    mode, encoder = _encoder_for(args, cfg) if args.encoder is not None else ("oracle", None)
    cfg = replace(cfg, encoder=replace(cfg.encoder, mode=mode))
    e = cfg.encoder
    latents = encode_images(mode, ds, ds.train_ids, encoder, cfg.loss_weights, e.steps, e.lr, e.momentum)
    model = init_model(len(ds.vocab), ds.spec.dims_per_layer, ds.spec.num_layers, cfg.model.feature_dim,
                       seed=cfg.seed, concept_names=ds.vocab.names)
    tc = cfg.model.train_config(cfg.seed)
    model, losses = train(model, latents, ds.concept_labels[ds.train_ids], tc)
    save_model(args.out, model, {"train_config": tc.to_dict(), "final_loss": float(losses[-1]),
                                 "train_encoder": mode, "spec": ds.spec.to_dict(), "vocabulary": ds.vocab.to_list()})
    write_tensor(args.out / "losses.gct", losses)
    write_json(args.out / "config.json", cfg.to_dict())
    print(json.dumps({"out": str(args.out), "final_loss": float(losses[-1])}))


def cmd_predict(args, cfg):
    model, _ = load_model(args.model)
    ds = load_dataset(args.data)
    i = _check_image(ds, args.image_id)
    mode, w = _latent(args, cfg, ds, i)
    pred = forward(model, w)
    k_min = ds.manifest.get("task_rule", {}).get("k_min", 2)
    result = {
        "image_id": i,
        "encoder_mode": mode,
        "concepts": {
            n: {"logit": float(z), "probability": float(p), "label": int(y)}
            for n, z, p, y in zip(model.concept_names, pred.logits, pred.probabilities, pred.labels)
        },
        "task": int(task_rule(pred.labels, k_min)),
    }
    if args.out:
        write_json(args.out / "prediction.json", result)
        write_json(args.out / "config.json", cfg.to_dict())
    print(json.dumps(result, sort_keys=True))


def cmd_ground(args, cfg):
    model, _ = load_model(args.model)
    ds = load_dataset(args.data)
    i = _check_image(ds, args.image_id)
    k = _concept(ds, args.concept)
    name = ds.vocab.names[k]
    out = args.out or Path("grounding") / f"{i:05d}" / name
    _, w = _latent(args, cfg, ds, i)
    result = ground_concept(model, w, k, ds.spec, cfg.spectrum, warn=False)
    curve = counterfactual_logit_curve(model, w, k, cfg.spectrum.magnitudes)
    summary = write_grounding(out, result, cfg.spectrum, curve, name)
    write_json(out / "config.json", cfg.to_dict())
    for msg in result.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    print(json.dumps({"out": str(out), "vote_pixels": summary["vote_pixels"], "empty_vote": summary["empty_vote"]}))


def cmd_evaluate(args, cfg):
    model, _ = load_model(args.model)
    ds = load_dataset(args.data)
    mode, encoder = _encoder_for(args, cfg)
    out = args.out or Path("eval")
    report = evaluate_run(model, mode, ds, cfg.spectrum, cfg.evaluation.sample_cap, out, encoder,
                          config=cfg.to_dict())
    write_json(out / "config.json", cfg.to_dict())
    print(json.dumps({"out": str(out), "macro_f1": report["concept_metrics"]["macro"]["f1"],
                      "task_accuracy": report["task_accuracy"]}))


def cmd_oracle_mask(args, cfg):
    ds = load_dataset(args.data)
    i = _check_image(ds, args.image_id)
    k = _concept(ds, args.concept)
    if args.out:
        path = args.out / oracle_mask_path("", k, i).name
        mask = oracle_mask(k, ds.latents[i], ds.spec, ds.vocab)
        write_mask(path, mask)
    else:
        path = oracle_mask_path(args.data, k, i)
        mask = ensure_oracle_mask(args.data, ds, k, i)
    print(json.dumps({"out": str(path), "pixels": int(mask.sum())}))


def cmd_reconstruct(args, cfg):
    ds = load_dataset(args.data)
    i = _check_image(ds, args.image_id)
    mode, encoder = _encoder_for(args, cfg) if args.encoder is not None else ("optimize", None)
    target = ds.images[i].astype(np.float64) / 255.0
    info = {"image_id": i, "encoder_mode": mode}
    if mode == "optimize":
        e = cfg.encoder
        res = invert_optimize(target, ds.spec, cfg.loss_weights, e.steps, e.lr, e.momentum, mean_latent=ds.mean_latent())
        w = res.latent
        info.update(best_loss=res.best_loss, steps_run=res.steps_run, diverged=res.diverged)
        write_tensor(args.out / "losses.gct", res.losses)
    else:
        w = encode_images(mode, ds, [i], encoder)[0]
    recon = render(w, ds.spec)
    info["pixel_l1"] = float(np.abs(recon - target).mean())
    write_tensor(args.out / "latent.gct", w)
    write_image(args.out / "reconstruction.ppm", quantize(recon))
    write_json(args.out / "reconstruction.json", info)
    write_json(args.out / "config.json", replace(cfg, encoder=replace(cfg.encoder, mode=mode)).to_dict())
    print(json.dumps(info, sort_keys=True))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "fit-encoder": cmd_fit_encoder,
    "train-cbm": cmd_train_cbm,
    "predict": cmd_predict,
    "ground": cmd_ground,
    "evaluate": cmd_evaluate,
    "oracle-mask": cmd_oracle_mask,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "gencbm: error: a subcommand is required\n")
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except (ConfigError, FormatError, OSError, ValueError, FloatingPointError) as exc:
        print(f"gencbm: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
