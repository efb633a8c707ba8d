import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gcasunet.data import OutOfBoundsError, SynthSpec, stack_dataset, synth_generate
from gcasunet.estimator import GCASUNetCounter

SMALL = dict(stages=1, patch_size=2, embed_dim=8, window_size=4, heads_per_stage=(2,), depths_per_stage=(2,),
             bottleneck_heads=2, epochs=2, warmup_epochs=1, batch_size=4)


@pytest.fixture(scope="module")
def data():
    recs = synth_generate(SynthSpec(image_size=16, count_range=(0, 3), object_radius_range=(1.0, 2.0), seed=2), 10)
    imgs, dens, counts = stack_dataset(recs)
    return imgs, [r.points for r in recs], dens, counts


@pytest.fixture(scope="module")
def fitted(data):
    imgs, pts, _, counts = data
    return GCASUNetCounter(**SMALL).fit(imgs, pts, eval_set=(imgs[:3], pts[:3]))


def test_fit_predict_shapes(fitted, data):
    imgs = data[0]
    assert fitted.predict(imgs).shape == (10,)
    dens = fitted.predict_density(imgs[:2])
    assert dens.shape == (2, 16, 16) and (dens >= 0).all()
    assert np.allclose(dens.astype(np.float64).sum(axis=(1, 2)), fitted.predict(imgs[:2]))
    assert len(fitted.history_) == 2 and np.isfinite(fitted.history_[-1].val_mae)


def test_points_and_density_targets_train_identically(fitted, data):
    imgs, _, dens, _ = data
    other = GCASUNetCounter(**SMALL).fit(imgs, dens)
    assert np.array_equal(other.predict(imgs), fitted.predict(imgs))


def test_score_and_evaluate(fitted, data):
    imgs, pts, _, counts = data
    rep = fitted.evaluate(imgs, pts)
    assert rep.mae == pytest.approx(np.mean(np.abs(counts - fitted.predict(imgs))), abs=1e-5)
    assert np.isfinite(fitted.score(imgs, counts))


def test_params_and_clone():
    est = GCASUNetCounter(**SMALL)
    params = est.get_params()
    assert params["embed_dim"] == 8 and params["epochs"] == 2
    c = clone(est).set_params(gcam=False)
    assert c.gcam is False and est.gcam is True
    assert c.model_config(16).gcam is False


def test_unfitted_estimator_raises(data):
    with pytest.raises(NotFittedError):
        GCASUNetCounter().predict(data[0])


def test_save_and_reload(fitted, data, tmp_path):
    fitted.save(tmp_path / "m.bin")
    again = GCASUNetCounter.from_checkpoint(tmp_path / "m.bin")
    assert again.embed_dim == 8 and again.input_size_ == 16
    assert np.array_equal(again.predict(data[0]), fitted.predict(data[0]))


def test_input_validation(fitted, data):
    imgs, pts, dens, _ = data
    est = GCASUNetCounter(**SMALL)
    with pytest.raises(ValueError, match="square"):
        est.fit(np.zeros((1, 16, 8, 3)), [[]])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        est.fit(imgs * 2, pts)
    with pytest.raises(ValueError, match="point sets"):
        est.fit(imgs, pts[:3])
    with pytest.raises(ValueError, match="do not match"):
        est.fit(imgs, dens[:, :8])
    with pytest.raises(OutOfBoundsError, match="target 0"):
        est.fit(imgs[:1], [np.array([[20.0, 1.0]])])
    with pytest.raises(ValueError, match="expects 16px"):
        fitted.predict(np.zeros((1, 32, 32, 3)))
    with pytest.raises(ValueError):
        fitted.predict(np.full((1, 16, 16, 3), np.nan))
