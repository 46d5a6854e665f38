import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from flowvad.errors import InputError, ShapeError
from flowvad.estimators import (
    FlowReconstructor,
    FramePredictor,
    HybridDetector,
    check_flow_cube,
    check_frame_cube,
    check_stc_pair,
)

TINY_R = dict(base_channels=(4, 4, 4, 4), num_slots=4, epochs=1, batch_size=4, lr=1e-3)
TINY_P = dict(base_channels=(4, 4, 4, 4), z_channels=2, epochs=1, batch_size=4, lr=1e-3)


def _cubes(n=6, t=3, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.random((n, t + 1, 1, 32, 32), dtype=np.float32),
        rng.normal(size=(n, t, 2, 32, 32)).astype(np.float32),
    )


def test_validation_helpers():
    frames, flows = _cubes()
    assert check_flow_cube(flows.reshape(6, 6, 32, 32)).shape == (6, 3, 2, 32, 32)
    assert check_frame_cube(frames[:, :, 0]).shape == (6, 4, 1, 32, 32)
    with pytest.raises(ShapeError):
        check_flow_cube(flows.reshape(6, 3, 2, 32, 32)[:, :, :1])
    with pytest.raises(ShapeError):
        check_flow_cube(flows, t=4)
    with pytest.raises(ShapeError):
        check_stc_pair(frames[:, :3], flows)
    with pytest.raises(ShapeError):
        check_stc_pair(frames[:5], flows)
    bad = flows.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(InputError):
        check_flow_cube(bad)
    with pytest.raises(InputError):
        check_flow_cube(np.zeros((0, 3, 2, 32, 32)))


def test_params_roundtrip_and_clone():
    est = HybridDetector(FlowReconstructor(**TINY_R), FramePredictor(**TINY_P), recon_flow_count=2)
    params = est.get_params()
    assert params["reconstructor__num_slots"] == 4
    assert params["predictor__z_channels"] == 2
    c = clone(est)
    assert c.get_params()["recon_flow_count"] == 2
    c.set_params(reconstructor__variant="c")
    assert c.reconstructor.variant == "c" and est.reconstructor.variant == "f"


def test_unfitted_raises():
    frames, flows = _cubes()
    with pytest.raises(NotFittedError):
        FlowReconstructor().transform(flows)
    with pytest.raises(NotFittedError):
        HybridDetector().decision_function(frames, flows)


def test_reconstructor_fit_transform():
    _, flows = _cubes()
    est = FlowReconstructor(**TINY_R).fit(flows)
    out = est.transform(flows)
    assert out.shape == flows.shape
    err = est.reconstruction_error(flows)
    assert err.shape == (6,) and (err >= 0).all()
    assert np.array_equal(est.score_samples(flows), -err)
    with pytest.raises(ShapeError):
        est.transform(flows[:, :2])


def test_predictor_fit_predict():
    frames, flows = _cubes()
    est = FramePredictor(**TINY_P).fit(frames, flows)
    x_hat = est.predict(frames, flows)
    assert x_hat.shape == (6, 1, 32, 32)
    assert np.array_equal(est.predict(frames[:, :-1], flows), x_hat)
    assert np.allclose(est.prediction_error(frames, flows), ((x_hat - frames[:, -1]) ** 2).reshape(6, -1).mean(1))


def test_hybrid_fit_scores_deterministic():
    frames, flows = _cubes()
    make = lambda: HybridDetector(FlowReconstructor(**TINY_R), FramePredictor(**TINY_P), finetune_epochs=1)
    a = make().fit(frames, flows)
    b = make().fit(frames, flows)
    da, db = a.decision_function(frames, flows), b.decision_function(frames, flows)
    assert da.shape == (6,) and np.array_equal(da, db)
    assert np.array_equal(a.score_samples(frames, flows), -da)
    # training scores are z-normalized per cue: each cue averages to zero
    s_r, s_p = a.cue_scores(frames, flows)
    assert abs((s_r - a.stats_.mu_r).mean()) < 1e-6
    assert abs((s_p - a.stats_.mu_p).mean()) < 1e-6
    assert a.k_ == 3


def test_hybrid_bad_k():
    frames, flows = _cubes()
    with pytest.raises(ValueError):
        HybridDetector(FlowReconstructor(**TINY_R), FramePredictor(**TINY_P), recon_flow_count=5).fit(frames, flows)
