import numpy as np
import pytest
from sklearn.base import clone

from layoutmv.estimators import (
    InverseDepthAligner,
    LayoutConditionEncoder,
    LayoutDepthRectifier,
    NotFittedError,
    TrajectoryPlanner,
    check_depth_array,
)
from layoutmv.fixtures import initial_camera
from layoutmv.oracle import SceneRenderer
from layoutmv.raster import render_conditions


def test_encoder_matches_render(bedroom, bedroom_rig):
    cam = bedroom_rig[0].scaled(32, 32)
    enc = LayoutConditionEncoder(layers=2)
    with pytest.raises(NotFittedError):
        enc.transform(cam)
    (stack,) = enc.fit(bedroom.to_dict()).transform(cam.to_dict())
    ref = render_conditions(bedroom, cam, 2)
    assert np.array_equal(stack.sem, ref.sem) and np.array_equal(stack.depth, ref.depth)
    assert clone(enc).get_params() == {"layers": 2}


def test_inverse_depth_aligner_recovers_affine():
    rng = np.random.default_rng(0)
    true = rng.uniform(1, 6, (20, 20))
    rel = 1.0 / (2.0 / true - 0.05)
    aligner = InverseDepthAligner().fit(rel, true)
    assert aligner.scale_ == pytest.approx(0.5) and aligner.offset_ == pytest.approx(0.025)
    assert np.allclose(aligner.transform(rel), true, rtol=1e-9)
    with pytest.raises(ValueError):
        aligner.fit(rel, true[:-1])


def test_rectifier_on_oracle_depth(bedroom, bedroom_rig):
    cam = bedroom_rig[1].scaled(64, 64)
    depth = SceneRenderer(bedroom).render(cam)[1].values
    stack = render_conditions(bedroom, cam, 3)
    rect = LayoutDepthRectifier()
    out = rect.fit_transform(1.0 / (0.8 / depth + 0.1), stack)
    assert np.allclose(out, depth, rtol=1e-6)
    assert np.allclose(rect.transform(depth), depth, rtol=1e-6)  # stack depths are float32
    with pytest.raises(TypeError):
        rect.fit(depth, None)


def test_planner_is_deterministic(bedroom):
    cam = initial_camera(bedroom, 64, 64)
    a = TrajectoryPlanner(seed=4).fit(bedroom, cam).predict()
    b = TrajectoryPlanner(seed=4).fit(bedroom, cam).predict()
    assert len(a) > 10 and [c.to_dict() for c in a] == [c.to_dict() for c in b]


def test_depth_array_validation():
    with pytest.raises(ValueError):
        check_depth_array(np.ones(3))
    with pytest.raises(ValueError):
        check_depth_array(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        check_depth_array(-np.ones((2, 2)))
