import hashlib
import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from jointemb import data as D
from jointemb import prnu as P


# -- joint labels -----------------------------------------------------------------

def test_casia_structure_has_120_classes():
    assert D.class_count([(range(60), ["CASIA-IrisCAM-V2", "OKI-IrisPass-h"])]) == 120


def test_miche_partial_crossing_has_375_classes():
    subjects = [f"s{i:02d}" for i in range(75)]
    structure = [
        (subjects, ["GS4-front", "GS4-rear", "GT2-front"]),
        (subjects[:48], ["iP5S-I-front", "iP5S-I-rear"]),
        (subjects[48:], ["iP5S-II-front", "iP5S-II-rear"]),
    ]
    assert D.class_count(structure) == 375


def test_oulu_structure_has_330_classes():
    assert D.class_count([(range(55), [f"phone{i}" for i in range(6)])]) == 330


def test_single_pair_is_one_class():
    assert D.class_count([(["a"], ["b"])]) == 1


def test_empty_manifest_rejected():
    with pytest.raises(D.DataError):
        D.build_joint_labels([])


def _samples(n_sub=3, n_sen=2, per=10):
    return [D.ImageSample(f"/x/s{s}_c{c}_{i:02d}.pgm", f"s{s}", f"c{c}")
            for s in range(n_sub) for c in range(n_sen) for i in range(per)]


@settings(max_examples=25)
@given(st.randoms(use_true_random=False))
def test_label_map_is_order_independent(rnd):
    a = _samples()
    b = list(a)
    rnd.shuffle(b)
    ma, _ = D.build_joint_labels(a)
    mb, _ = D.build_joint_labels([D.ImageSample(s.path, s.subject_id, s.sensor_id) for s in b])
    assert ma == mb


# -- 70:30 split ------------------------------------------------------------------

@pytest.mark.parametrize("n,train", [(20, 14), (10, 7), (2, 1), (3, 2), (7, 5)])
def test_train_count_rule(n, train):
    assert D.train_count(n) == train


def test_split_counts_per_class():
    samples = D.split_70_30(_samples(per=20), 0)
    for c in range(6):
        members = [s for s in samples if s.class_index == c]
        assert sum(s.split == "train" for s in members) == 14
        assert sum(s.split == "test" for s in members) == 6


def test_split_ten_per_class_is_seven_three():
    samples = D.split_70_30(_samples(per=10), 1)
    assert sum(s.split == "train" for s in samples) == 6 * 7


def test_split_determinism():
    a = [s.split for s in D.split_70_30(_samples(), 5)]
    b = [s.split for s in D.split_70_30(_samples(), 5)]
    c = [s.split for s in D.split_70_30(_samples(), 6)]
    assert a == b
    assert a != c
    assert a.count("train") == c.count("train")


def test_split_rejects_singleton_class():
    s = _samples(per=2) + [D.ImageSample("/x/lonely.pgm", "s9", "c0")]
    with pytest.raises(D.DataError, match="s9"):
        D.split_70_30(s, 0)


# -- manifest ---------------------------------------------------------------------

def test_manifest_round_trip_with_relative_paths(tmp_path):
    (tmp_path / "img").mkdir()
    samples = [D.ImageSample(str(tmp_path / "img" / f"{i}.pgm"), "s", f"c{i % 2}") for i in range(4)]
    D.split_70_30(samples, 0)
    D.write_manifest(samples, tmp_path / "m.json")
    recs = json.loads((tmp_path / "m.json").read_text())
    assert recs[0]["path"] == "img/0.pgm"
    back = D.read_manifest(tmp_path / "m.json")
    assert [(s.path, s.subject_id, s.sensor_id, s.split) for s in back] == \
           [(s.path, s.subject_id, s.sensor_id, s.split) for s in samples]


def test_bad_manifest_errors(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(D.DataError):
        D.read_manifest(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('[{"path": "x.pgm"}]')
    with pytest.raises(D.DataError):
        D.read_manifest(tmp_path / "b.json")


# -- images -----------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 5)).astype(np.uint8)
    D.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_matches_pillow(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(9, 11)).astype(np.uint8)
    D.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(np.array(Image.open(tmp_path / "a.pgm")), img)


def test_png_is_read(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, size=(6, 6)).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    np.testing.assert_array_equal(D.read_image(tmp_path / "a.png"), img)


def test_corrupt_image_error_names_path(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(D.DataError, match="bad.pgm"):
        D.read_image(tmp_path / "bad.pgm")


def test_constant_255_gives_ones(tmp_path):
    D.write_pgm(tmp_path / "w.pgm", np.full((48, 48), 255, dtype=np.uint8))
    out = D.load_and_resize(D.ImageSample(str(tmp_path / "w.pgm"), "s", "c"))
    assert out.shape == (48, 48)
    assert np.all(out == 1.0)


def test_checkerboard_mean_preserved():
    board = ((np.indices((96, 96)).sum(axis=0) % 2) * 255).astype(np.float64)
    out = D.resize_bilinear(board, 48)
    assert abs(out.mean() - board.mean()) / 255 <= 1e-3


@pytest.mark.parametrize("shape", [(96, 96), (60, 80), (31, 47), (48, 48), (20, 20)])
def test_resize_matches_opencv_bilinear(shape):
    img = np.zeros(shape)
    img[shape[0] // 3, shape[1] // 2] = 255.0
    img += np.random.default_rng(sum(shape)).random(shape) * 10
    ref = cv2.resize(img, (48, 48), interpolation=cv2.INTER_LINEAR)
    np.testing.assert_allclose(D.resize_bilinear(img, 48), ref, atol=1e-9)


# -- synthetic generator ------------------------------------------------------------

def test_synth_counts(small_synth):
    out, cfg, samples = small_synth
    assert len(samples) == 4 * 2 * 6
    assert len(list((out / "images").glob("*.pgm"))) == 48


def test_synth_is_byte_reproducible(tmp_path):
    cfg = D.SynthConfig(n_subjects=2, n_sensors=2, images_per_class=3, seed=9)
    D.generate_synthetic(cfg, tmp_path / "a")
    D.generate_synthetic(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        q = tmp_path / "b" / "images" / p.name
        assert hashlib.sha256(p.read_bytes()).digest() == hashlib.sha256(q.read_bytes()).digest()


def test_synth_without_noise_gives_identical_class_images():
    cfg = D.SynthConfig(n_subjects=1, n_sensors=1, sigma_k=0.0, sigma_eta=0.0, jitter=0)
    a = D.synth_image(cfg, 0, 0, 0)
    b = D.synth_image(cfg, 0, 0, 5)
    # only brightness varies; after normalizing it the images coincide
    np.testing.assert_allclose(a / a.mean(), b / b.mean(), atol=1e-12)


def test_residual_difference_reveals_prnu_difference():
    cfg = D.SynthConfig(n_subjects=1, n_sensors=2, sigma_eta=0.0, jitter=0)
    base = D.subject_pattern(cfg, 0)
    k1, k2 = D.sensor_prnu(cfg, 0), D.sensor_prnu(cfg, 1)
    a = base[:48, :48]
    i1 = np.clip(a * (1 + k1), 0, 1)
    i2 = np.clip(a * (1 + k2), 0, 1)
    np.testing.assert_allclose(i1 - i2, (k1 - k2) * a, atol=1e-12)


def test_synth_images_in_unit_range():
    cfg = D.SynthConfig(sigma_k=0.5, sigma_eta=0.3)
    for i in range(5):
        img = D.synth_image(cfg, i, i % 3, i)
        assert img.min() >= 0.0 and img.max() <= 1.0


@pytest.mark.parametrize("field,value", [("n_subjects", 0), ("sigma_k", -0.1), ("jitter", -1)])
def test_synth_config_validation(field, value):
    with pytest.raises(ValueError, match=field):
        D.SynthConfig(**{field: value})


def test_within_sensor_residuals_correlate_more(default_synth):
    _, cfg, samples = default_synth
    sel = [s for s in samples if s.subject_id in ("sub00", "sub01")]
    imgs = D.load_images(sel)
    res = [P.noise_residual(i) for i in imgs]
    within, cross = [], []
    for i in range(0, len(sel), 3):
        for j in range(i + 1, len(sel), 3):
            v = P.ncc(res[i], res[j])
            (within if sel[i].sensor_id == sel[j].sensor_id else cross).append(v)
    assert np.mean(within) > np.mean(cross) + 0.05
