import numpy as np
import pytest

from jointemb import data as D
from jointemb import embedder as E
from jointemb.config import RunConfig
from jointemb.train import train


@pytest.fixture(scope="module")
def small_train(small_synth):
    _, _, samples = small_synth
    tr = D.select_split(samples, "train")
    return D.load_images(tr), np.array([s.class_index for s in tr])


def test_lr_schedule_is_logged(small_train, tmp_path):
    x, y = small_train
    cfg = RunConfig(epochs=17, k=4)
    res = train(x, y, cfg, log_path=tmp_path / "log.jsonl")
    lrs = {r["epoch"]: r["lr"] for r in res.history}
    assert lrs[0] == pytest.approx(1e-4) and lrs[7] == pytest.approx(1e-4)
    assert lrs[8] == pytest.approx(1e-5)
    assert lrs[16] == pytest.approx(1e-6)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 17


def test_zero_epochs_returns_initialization(small_train):
    x, y = small_train
    cfg = RunConfig(epochs=0, seed=4)
    with pytest.warns(UserWarning, match="epochs=0"):
        res = train(x, y, cfg)
    init = E.init_params(cfg.k, seed=[cfg.seed, 11])
    for name, arr in init.layers.items():
        np.testing.assert_array_equal(res.params.layers[name], arr)
    assert res.history == []


@pytest.mark.parametrize("mode,loss", [("siamese", "dmcl"), ("triplet", "triplet-offline"),
                                       ("triplet", "triplet-semihard"), ("triplet", "npair-hard"),
                                       ("classical", "xent")])
def test_every_mode_runs_and_is_seeded(small_train, mode, loss):
    x, y = small_train
    cfg = RunConfig(mode=mode, loss=loss, epochs=1, k=4, seed=2)
    a, b = train(x, y, cfg), train(x, y, cfg)
    assert a.history == b.history
    assert np.isfinite(a.history[0]["loss"])
    for name in a.params.layers:
        np.testing.assert_array_equal(a.params.layers[name], b.params.layers[name])


def test_classical_cross_entropy_decreases(default_synth):
    _, _, samples = default_synth
    tr = D.select_split(samples, "train")
    cfg = RunConfig(mode="classical", loss="xent", epochs=3)
    res = train(D.load_images(tr), [s.class_index for s in tr], cfg, n_classes=30)
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(np.zeros((0, 48, 48)), [], RunConfig())
