import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikepose.geometry import Camera, apply_crop_points, crop_from_box
from bikepose.losses import LossInputs, LossWeights, loss_terms, normalize_param
from bikepose.model import CanonicalTemplate, KeypointId, Pose8D, canonical_keypoints, project_keypoints, repose
from bikepose.synth import DatasetConfig, generate_dataset

T = CanonicalTemplate()
CAM = Camera()
ZERO = np.zeros((11, 3))
NONE_VISIBLE = np.zeros(11, bool)


def _inputs(pose, res=ZERO, kp=None, vis=None, center=None):
    return LossInputs(pose, res, np.zeros((11, 2)) if kp is None else kp, vis, center)


@pytest.fixture(scope="module")
def record():
    return next(generate_dataset(DatasetConfig(n_templates=1, samples_per_template=1, seed=2)))


def test_normalize_param_examples():
    assert normalize_param(-1.5, -5, 2) == 0.0
    assert normalize_param(90, -90, 90) == 1.0
    assert normalize_param(0.5, -1, 1) == 0.5
    assert isinstance(normalize_param(170, -180, 180, periodic=True, reference=-170), float)
    assert normalize_param(170, -180, 180, periodic=True, reference=-170) == pytest.approx(-20 / 180, abs=1e-15)


def test_default_weights():
    assert LossWeights().as_tuple() == (1.0, 1.0, 2.0, 0.5, 1.0, 1.0, 0.2)


def test_wrapped_pedal_fixture():
    out = loss_terms(
        _inputs(Pose8D(theta_p=170), vis=NONE_VISIBLE), _inputs(Pose8D(theta_p=-170), vis=NONE_VISIBLE),
        CAM, crop_from_box((0, 0, 512, 512)), T,
    )
    assert out.l_ps == pytest.approx(0.00617, abs=1e-5)
    assert out.l_ps == pytest.approx((20 / 180) ** 2 / 2, abs=1e-15)
    assert out.total == pytest.approx(2 * (20 / 180) ** 2 / 2, abs=1e-15)


def test_unit_pedal_steer_term_doubles():
    out = loss_terms(
        _inputs(Pose8D(theta_p=180, theta_s=90), vis=NONE_VISIBLE), _inputs(Pose8D(), vis=NONE_VISIBLE),
        CAM, crop_from_box((0, 0, 512, 512)), T,
    )
    assert out.l_ps == pytest.approx(1.0, abs=1e-15)
    assert out.total == pytest.approx(2.0, abs=1e-15)


def test_hand_computed_parameter_fixture():
    res = np.zeros((11, 3))
    res[KeypointId.seat] = (0.05, 0, 0)
    pred = _inputs(Pose8D(170, 10, 2, -175, -1, (0.5, 0.1, -1)), res, vis=NONE_VISIBLE, center=(300, 260))
    gt = _inputs(Pose8D(-170, -20, 0, 175, 1, (0, 0, 0)), vis=NONE_VISIBLE, center=(256, 256))
    out = loss_terms(pred, gt, CAM, crop_from_box((0, 0, 512, 512)), T)
    l_ps = ((20 / 180) ** 2 + (30 / 90) ** 2) / 2
    l_r = (0.4**2 + (10 / 180) ** 2 + 0.4**2) / 3
    l_t = (0.5**2 + 0.2**2 + (2 / 7) ** 2) / 3
    l_3d = (0.05 / 0.25) ** 2 / 33
    l_aux = ((44 / 256) ** 2 + (4 / 256) ** 2) / 2
    for got, want in ((out.l_ps, l_ps), (out.l_r, l_r), (out.l_t, l_t), (out.l_3d, l_3d), (out.l_aux, l_aux)):
        assert got == pytest.approx(want, abs=1e-10)
    assert out.l_2dk is None and out.l_2dcon is None
    assert out.total == pytest.approx(l_r + l_t + 2 * l_ps + 0.5 * l_3d + 0.2 * l_aux, abs=1e-10)


def test_hand_computed_keypoint_fixture(record):
    crop = crop_from_box(record.bbox)
    vis = np.ones(11, bool)
    vis[[0, 5, 9]] = False
    gt = _inputs(record.pose, record.residuals, record.keypoints_2d_Ib, vis)
    pred = _inputs(record.pose, record.residuals, record.keypoints_2d_Ib + (3.0, -4.0))
    out = loss_terms(pred, gt, record.camera, crop, T)
    expected = ((3 / 256) ** 2 + (4 / 256) ** 2) / 2
    assert out.l_2dk == pytest.approx(expected, abs=1e-10)
    assert out.l_2dcon == pytest.approx(expected, abs=1e-10)
    assert out.total == pytest.approx(2 * expected, abs=1e-10)


def test_perfect_prediction_is_zero(record):
    crop = crop_from_box(record.bbox)
    side = _inputs(record.pose, record.residuals, record.keypoints_2d_Ib, record.visibility, record.bbox.center)
    out = loss_terms(side, side, record.camera, crop, T)
    assert all(v == pytest.approx(0, abs=1e-24) for v in out.terms().values())
    assert out.total == pytest.approx(0, abs=1e-24)


pose_st = st.builds(
    Pose8D,
    theta_p=st.floats(-180, 180),
    theta_s=st.floats(-90, 90),
    theta_x=st.floats(-5, 5),
    theta_y=st.floats(-180, 180),
    theta_z=st.floats(-5, 5),
    t=st.tuples(st.floats(-1, 1), st.floats(-0.5, 0.5), st.floats(-5, 2)),
)


def _self_consistent(pose, res, crop):
    k3d = repose(T, canonical_keypoints(T, res, None), pose)
    return apply_crop_points(crop, project_keypoints(CAM, k3d))


@settings(max_examples=60)
@given(pose_st, pose_st)
def test_consistency_term_vanishes_and_terms_nonnegative(pred_pose, gt_pose):
    crop = crop_from_box((100, 100, 400, 350))
    kp = _self_consistent(pred_pose, ZERO, crop)
    out = loss_terms(_inputs(pred_pose, kp=kp), _inputs(gt_pose, kp=kp + 1.0), CAM, crop, T)
    assert out.l_2dcon == pytest.approx(0, abs=1e-12)
    assert all(v >= 0 for v in out.terms().values() if v is not None)


@settings(max_examples=60)
@given(pose_st, pose_st)
def test_wrap_invariance(pred_pose, gt_pose):
    crop = crop_from_box((100, 100, 400, 350))
    kp = _self_consistent(pred_pose, ZERO, crop)
    a = loss_terms(_inputs(pred_pose, kp=kp), _inputs(gt_pose, kp=kp + 2.0), CAM, crop, T)
    p2 = pred_pose.as_array() + [360, 0, 0, 360, 0, 0, 0, 0]
    b = loss_terms(_inputs(Pose8D.from_array(p2), kp=kp), _inputs(gt_pose, kp=kp + 2.0), CAM, crop, T)
    for name, v in a.terms().items():
        assert b.terms()[name] == pytest.approx(v, rel=1e-12, abs=1e-15)


@settings(max_examples=40)
@given(pose_st, pose_st, st.integers(0, 6), st.floats(0, 10))
def test_total_linear_in_each_weight(pred_pose, gt_pose, k, beta):
    crop = crop_from_box((100, 100, 400, 350))
    kp = _self_consistent(gt_pose, ZERO, crop)
    pred = _inputs(pred_pose, kp=kp + 1.5, center=(250, 240))
    gt = _inputs(gt_pose, kp=kp, center=(256, 256))
    w = list(LossWeights().as_tuple())
    base = loss_terms(pred, gt, CAM, crop, T)
    w[k] = beta
    changed = loss_terms(pred, gt, CAM, crop, T, LossWeights(*w))
    term = list(base.terms().values())[k]
    delta = (beta - LossWeights().as_tuple()[k]) * term
    assert changed.total == pytest.approx(base.total + delta, rel=1e-12, abs=1e-12)


def test_zero_only_at_truth():
    crop = crop_from_box((0, 0, 512, 512))
    gt = _inputs(Pose8D(theta_y=30), vis=NONE_VISIBLE)
    for field in range(8):
        x = Pose8D(theta_y=30).as_array()
        x[field] += 0.5 if field < 5 else 0.01
        assert loss_terms(_inputs(Pose8D.from_array(x), vis=NONE_VISIBLE), gt, CAM, crop, T).total > 0
