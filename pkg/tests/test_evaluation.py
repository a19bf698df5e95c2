import numpy as np
import pytest

from gencbm.evaluation import concept_metrics, encode_images, evaluate_run, iou, model_hash, pointing_game
from gencbm.formats import read_json
from gencbm.grounding import MagnitudeSpectrum
from gencbm.inversion import fit_encoder_on_images


def test_concept_metrics_hand_example():
    gt = np.array([[1, 0], [1, 0], [0, 0], [0, 1]])
    pred = np.array([[1, 1], [0, 0], [1, 0], [0, 1]])
    m = concept_metrics(pred, gt, ["a", "b"])
    np.testing.assert_allclose(m.precision, [0.5, 0.5])
    np.testing.assert_allclose(m.recall, [0.5, 1.0])
    np.testing.assert_allclose(m.f1, [0.5, 2 / 3])
    np.testing.assert_array_equal(m.support, [2, 1])
    assert m.macro_f1 == pytest.approx((0.5 + 2 / 3) / 2)
    d = m.to_dict()
    assert d["per_concept"]["b"]["support"] == 1 and d["macro"]["f1"] == m.macro_f1


def test_zero_denominators_give_zero():
    gt = np.zeros((3, 2), int)
    pred = np.zeros((3, 2), int)
    m = concept_metrics(pred, gt)
    np.testing.assert_array_equal([m.precision, m.recall, m.f1], 0.0)
    # all predicted, none present: precision 0, recall 0/0 -> 0
    m = concept_metrics(np.ones((3, 2)), gt)
    np.testing.assert_array_equal(m.f1, 0.0)
    with pytest.raises(ValueError):
        concept_metrics(np.ones((3, 2)), np.ones((2, 2)))


def test_iou_conventions():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, a) == 1.0
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert iou(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        iou(a, b.T)


def test_pointing_game_conventions():
    heat = np.array([[0.1, 0.9], [0.9, 0.2]])
    assert pointing_game(heat, np.array([[0, 1], [0, 0]])) is True
    # tie: the first maximum in row-major order decides
    assert pointing_game(heat, np.array([[0, 0], [1, 0]])) is False
    assert pointing_game(heat, np.zeros((2, 2))) is None


def test_encode_images_modes(small_dataset):
    ds = small_dataset
    ids = ds.test_ids[:3]
    np.testing.assert_array_equal(encode_images("oracle", ds, ids), ds.latents[ids])
    enc = fit_encoder_on_images(ds.images[ds.train_ids], ds.latents[ds.train_ids], ds.spec)
    assert encode_images("regression", ds, ids, enc).shape == (3, 8, 6)
    with pytest.raises(ValueError):
        encode_images("regression", ds, ids)
    with pytest.raises(ValueError):
        encode_images("other", ds, ids)
    z = encode_images("optimize", ds, ids[:1], steps=3)
    assert z.shape == (1, 8, 6) and np.all(np.isfinite(z))


def test_model_hash_tracks_parameters(small_model):
    h = model_hash(small_model)
    m2 = small_model.copy()
    assert model_hash(m2) == h
    m2.c[0] += 1e-12
    assert model_hash(m2) != h


def test_evaluate_run_report(tmp_path, small_model, small_dataset):
    spectrum = MagnitudeSpectrum(magnitudes=(-2.0, -1.0, 1.0, 2.0), theta=2)
    report = evaluate_run(small_model, "oracle", small_dataset, spectrum, sample_cap=2, out=tmp_path,
                          config={"seed": 1, "paths": {"out": str(tmp_path)}})
    assert read_json(tmp_path / "report.json") == report
    assert "paths" not in report["config"]
    assert set(read_json(tmp_path / "timings.json")) == {"encode_s", "grounding_s", "total_s"}
    assert report["format_version"] == "gencbm-report/1"
    assert report["test_images"] == 40 and report["timings"] == "timings.json"
    gm = report["grounding_metrics"]
    assert all(v["evaluated"] <= 2 for v in gm["per_concept"].values())
    assert gm["evaluated"] == sum(v["evaluated"] for v in gm["per_concept"].values())
    cases = sorted(p.relative_to(tmp_path).as_posix() for p in (tmp_path / "cases").glob("*/*"))
    assert len(cases) == gm["evaluated"]
    assert (tmp_path / cases[0] / "vote.pgm").exists()


def test_evaluate_run_is_byte_deterministic(tmp_path, small_model, small_dataset):
    spectrum = MagnitudeSpectrum(magnitudes=(-1.0, 1.0), theta=1)
    for name in ("a", "b"):
        evaluate_run(small_model, "oracle", small_dataset, spectrum, sample_cap=1, out=tmp_path / name,
                     config={"paths": {"out": name}})
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 5
    for rel in files:
        if rel.name != "timings.json":
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_evaluate_run_without_output(small_model, small_dataset):
    report = evaluate_run(small_model, "oracle", small_dataset, sample_cap=0, max_test_images=5)
    assert report["test_images"] == 5 and report["grounding_metrics"]["evaluated"] == 0
    with pytest.raises(ValueError):
        evaluate_run(small_model, "oracle", small_dataset, sample_cap=-1)
