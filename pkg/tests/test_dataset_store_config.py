import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from gencbm.bottleneck import forward
from gencbm.config import ConfigError, RunConfig, load_config
from gencbm.dataset import (
    build_dataset,
    ensure_oracle_mask,
    generate_dataset,
    load_dataset,
    manifest_hash,
    oracle_mask,
    oracle_mask_path,
    oracle_masks_batch,
)
from gencbm.formats import FormatError, read_json, read_mask, write_json
from gencbm.grounding import quantize
from gencbm.inversion import fit_encoder_on_images
from gencbm.renderer import DEFAULT_VOCAB, LatentSpec, lesion_support, render
from gencbm.store import load_encoder, load_model, save_encoder, save_model


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    ds = generate_dataset(root, seed=3, train=12, test=4)
    return root, ds


def test_build_is_deterministic_and_consistent(spec):
    a = build_dataset(11, spec, train=6, test=2)
    b = build_dataset(11, spec, train=6, test=2)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.latents, b.latents)
    # stored latents reproduce the images exactly
    np.testing.assert_array_equal(quantize(render(a.latents[5], spec)), a.images[5])
    np.testing.assert_array_equal(a.latents, a.latents.astype(np.float32))
    assert list(a.train_ids) == list(range(6)) and list(a.test_ids) == [6, 7]
    with pytest.raises(ValueError):
        build_dataset(1, spec, train=0)


def test_dataset_layout_and_round_trip(tiny):
    root, ds = tiny
    assert sorted(p.name for p in root.iterdir()) == ["concepts.csv", "images", "latents.gct", "manifest.json", "tasks.csv"]
    assert (root / "concepts.csv").read_text().splitlines()[0] == "image_id," + ",".join(DEFAULT_VOCAB.names)
    assert (root / "tasks.csv").read_text().splitlines()[:2] == ["image_id,task", f"0,{ds.task_labels[0]}"]
    back = load_dataset(root)
    np.testing.assert_array_equal(back.latents, ds.latents)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.concept_labels, ds.concept_labels)
    np.testing.assert_array_equal(back.task_labels, ds.task_labels)
    assert back.manifest == ds.manifest
    assert len(manifest_hash(root)) == 64


def test_corrupt_dataset_files_are_rejected(tmp_path):
    generate_dataset(tmp_path, seed=4, train=3, test=1)
    csv = (tmp_path / "concepts.csv").read_text()
    lines = csv.splitlines()
    lines[2] = lines[2][:-1] + "7"
    (tmp_path / "concepts.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    (tmp_path / "concepts.csv").write_text(csv)
    load_dataset(tmp_path)
    img = tmp_path / "images" / "00002.ppm"
    data = bytearray(img.read_bytes())
    data[-1] ^= 1
    img.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="checksum"):
        load_dataset(tmp_path)


def test_oracle_masks_sit_on_the_lesion(small_dataset):
    ds = small_dataset
    for k in range(len(DEFAULT_VOCAB)):
        masks = oracle_masks_batch(k, ds.latents[:10], ds.spec)
        for i in range(10):
            assert masks[i].any(), (k, i)
            halo = binary_dilation(lesion_support(ds.latents[i], ds.spec), iterations=12)
            # geometry concepts move the rim, so allow a generous halo
            assert masks[i][~halo].sum() == 0, (k, i)
        np.testing.assert_array_equal(oracle_mask(k, ds.latents[3], ds.spec), masks[3])


def test_oracle_mask_ignores_the_controlling_coordinate(spec, rng):
    w = rng.standard_normal(spec.shape)
    w2 = w.copy()
    w2[0, 4] = -w2[0, 4] + 3.0
    np.testing.assert_array_equal(oracle_mask(3, w, spec), oracle_mask(3, w2, spec))


def test_oracle_mask_cache(tiny):
    root, ds = tiny
    p = oracle_mask_path(root, 2, 5)
    assert p.name == "k2_00005.pgm"
    m = ensure_oracle_mask(root, ds, 2, 5)
    assert p.exists()
    np.testing.assert_array_equal(read_mask(p), m)
    np.testing.assert_array_equal(ensure_oracle_mask(root, ds, 2, 5), m)


def test_model_round_trip_is_float32_exact(tmp_path, small_model, small_dataset):
    save_model(tmp_path / "m", small_model, {"seed": 1})
    back, meta = load_model(tmp_path / "m")
    assert meta["seed"] == 1 and meta["format"] == "gencbm-model/1"
    assert back.concept_names == small_model.concept_names
    np.testing.assert_array_equal(back.A, small_model.A.astype(np.float32))
    w = small_dataset.latents[:20]
    np.testing.assert_allclose(forward(back, w).logits, forward(small_model, w).logits, atol=1e-4)
    save_model(tmp_path / "m2", back)
    for name in ("A.gct", "b.gct", "V.gct", "c.gct"):
        assert (tmp_path / "m" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()


def test_model_sidecar_is_checked(tmp_path, small_model):
    save_model(tmp_path, small_model)
    write_json(tmp_path / "model.json", {"format": "other"})
    with pytest.raises(FormatError):
        load_model(tmp_path)


def test_encoder_round_trip(tmp_path, small_dataset):
    ds = small_dataset
    enc = fit_encoder_on_images(ds.images[:30], ds.latents[:30], ds.spec)
    save_encoder(tmp_path, enc)
    back = load_encoder(tmp_path)
    np.testing.assert_array_equal(back.weights, enc.weights.astype(np.float32))
    assert back.spec == ds.spec and back.ridge == enc.ridge
    meta = read_json(tmp_path / "encoder.json")
    write_json(tmp_path / "encoder.json", {**meta, "feature_layout": "other"})
    with pytest.raises(FormatError):
        load_encoder(tmp_path)


def test_config_round_trip_and_defaults(tmp_path):
    cfg = RunConfig()
    d = cfg.to_dict()
    assert d["seed"] == 42 and d["data"] == {"train": 2000, "test": 500, "k_min": 2}
    assert d["spectrum"]["magnitudes"] == [-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert RunConfig.from_dict(d) == cfg
    write_json(tmp_path / "c.json", d)
    assert load_config(tmp_path / "c.json") == cfg
    partial = RunConfig.from_dict({"seed": 7, "spectrum": {"theta": 3}})
    assert partial.seed == 7 and partial.spectrum.theta == 3 and partial.spectrum.sigma == 3.0
    assert partial.spec == LatentSpec()


@pytest.mark.parametrize(
    "bad",
    [
        {"nope": 1},
        {"spectrum": {"thetaa": 3}},
        {"spectrum": []},
        {"renderer": "other"},
        {"seed": -1},
        {"seed": 2**64},
        {"spectrum": {"theta": 11}},
        {"encoder": {"mode": "magic"}},
        {"data": {"train": 0}},
        {"spec": {"num_layers": 4}},
        {"evaluation": {"sample_cap": -1}},
    ],
)
def test_config_rejects_bad_documents(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)
