import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikepose.geometry import angular_diff, rot_y, rotation_from_euler
from bikepose.metrics import (
    EvaluationError,
    add_metric,
    average_recall,
    build_report,
    iou3d,
    keypoint2d_ar,
    mae_per_parameter,
    pose_errors,
    pose_within,
)
from bikepose.model import POSE_FIELDS, CanonicalTemplate, OrientedBox3D, Pose8D
from bikepose.oracles import random_overlapping_boxes
from bikepose.predictions import Prediction
from bikepose.synth import DatasetConfig, ParamDomain, default_template_set, generate_dataset, sample_pose

T = CanonicalTemplate()


def _unit(center=(0, 0, 0), rotation=None):
    return OrientedBox3D(center, np.eye(3) if rotation is None else rotation, (0.5, 0.5, 0.5))


def test_mae_zero_and_wrap():
    p = [Pose8D(theta_y=30, t=(0.1, 0, 0))]
    assert all(v == 0 for v in mae_per_parameter(p, p).values())
    mae = mae_per_parameter([Pose8D(theta_y=179)], [Pose8D(theta_y=-179)])
    assert mae["theta_y"] == pytest.approx(2.0, abs=1e-12)


def test_mae_matches_loop():
    rng = np.random.default_rng(0)
    dom = ParamDomain()
    preds = [sample_pose(dom, rng) for _ in range(100)]
    gts = [sample_pose(dom, rng) for _ in range(100)]
    mae = mae_per_parameter(preds, gts)
    for i, name in enumerate(POSE_FIELDS):
        total = 0.0
        for p, g in zip(preds, gts):
            a, b = p.as_array()[i], g.as_array()[i]
            if i < 5:
                d = abs(a - b) % 360
                total += min(d, 360 - d)
            else:
                total += abs(a - b)
        assert mae[name] == pytest.approx(total / 100, abs=1e-12)


def test_pose_error_cases():
    R = rotation_from_euler(3, 50, -2)
    assert pose_errors(R, (1, 2, 3), R, (1, 2, 3)).rot_err == pytest.approx(0, abs=1e-6)
    e = pose_errors(R @ rot_y(4), (0.03, 0, 0), R, (0, 0, 0))
    assert e.rot_err == pytest.approx(4.0, abs=1e-9)
    assert e.trans_err == pytest.approx(0.03, abs=1e-12)
    assert pose_within(5, 0.05)(e)
    assert not pose_within(3.99, 0.05)(e) and not pose_within(5, 0.029)(e)
    assert pose_errors(R @ rot_y(180), (0, 0, 0), R, (0, 0, 0)).rot_err == pytest.approx(180, abs=1e-6)


eulers = st.tuples(st.floats(-180, 180), st.floats(-180, 180), st.floats(-180, 180))


@settings(max_examples=100)
@given(eulers, eulers, eulers)
def test_geodesic_is_a_metric(a, b, c):
    Ra, Rb, Rc = (rotation_from_euler(*x) for x in (a, b, c))

    def d(P, Q):
        return pose_errors(P, (0, 0, 0), Q, (0, 0, 0)).rot_err

    assert d(Ra, Rb) == pytest.approx(d(Rb, Ra), abs=1e-6)
    assert d(Ra, Rc) <= d(Ra, Rb) + d(Rb, Rc) + 1e-6
    assert d(Ra, Ra) < 1e-5


def test_iou_identical_and_disjoint():
    a = OrientedBox3D((0.3, -0.2, 1), rotation_from_euler(10, 40, -5), (0.4, 0.7, 1.1))
    assert iou3d(a, a) == 1.0
    assert iou3d(_unit(), _unit((10, 0, 0))) == 0.0


def test_iou_half_offset_cube():
    a, b = _unit(), _unit((0.5, 0, 0))
    assert iou3d(a, b) == 1 / 3
    assert abs(iou3d(a, b, "monte_carlo", 200_000, np.random.default_rng(1)) - 1 / 3) <= 0.01


def test_iou_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = random_overlapping_boxes(rng)
        ab = iou3d(a, b)
        assert ab == pytest.approx(iou3d(b, a), abs=1e-9)
        R = rotation_from_euler(*rng.uniform(-180, 180, 3))
        t = rng.uniform(-5, 5, 3)
        moved = [OrientedBox3D(R @ x.center + t, R @ x.rotation, x.half_extents) for x in (a, b)]
        assert iou3d(*moved) == pytest.approx(ab, abs=1e-9)
        mc_ab = iou3d(a, b, "mc", 50_000, rng)
        mc_ba = iou3d(b, a, "mc", 50_000, rng)
        assert abs(mc_ab - mc_ba) <= 0.02


def test_iou_nested_boxes():
    small = OrientedBox3D((0, 0, 0), rotation_from_euler(0, 30, 0), (0.2, 0.2, 0.2))
    big = OrientedBox3D((0, 0, 0), np.eye(3), (1, 1, 1))
    assert iou3d(small, big) == pytest.approx(small.volume / big.volume, abs=1e-12)


def test_average_recall_counts():
    assert average_recall([1, 1, 1], lambda x: x) == 100
    assert average_recall([1, 1, 0, 1], lambda x: x) == 75
    with pytest.raises(EvaluationError):
        average_recall([], bool)


def test_add_cases():
    gt = Pose8D(theta_p=20, theta_y=40, t=(0.2, 0, -1))
    kc = T.mean_keypoints
    assert add_metric(gt, gt, kc) == 0.0
    shifted = Pose8D.from_dict({**gt.to_dict(), "tx": gt.t[0] + 0.1})
    assert add_metric(shifted, gt, kc) == pytest.approx(0.1, abs=1e-12)
    flipped = Pose8D.from_dict({**gt.to_dict(), "theta_p": gt.theta_p + 180})
    assert add_metric(flipped, gt, kc) == pytest.approx(2 * (2 * 0.17) / 11, abs=1e-9)
    assert 2 * 0.34 / 11 == pytest.approx(0.0618, abs=1e-4)


def test_keypoint_ar_fixtures():
    rng = np.random.default_rng(0)
    gt = rng.uniform(0, 512, (4, 11, 2))
    vis = np.ones((4, 11), bool)
    assert set(keypoint2d_ar(gt, gt, vis).values()) == {100.0}
    ar = keypoint2d_ar(gt + (7.0, 0.0), gt, vis)
    assert ar == {5.0: 0.0, 10.0: 100.0, 20.0: 100.0, 30.0: 100.0}
    # Distances 2, 4, ..., 22 on one axis; their mean is 12.
    dist = np.arange(1, 12) * 2.0
    mixed = gt.copy()
    mixed[..., 0] += dist
    assert sum(dist) / len(dist) == 12.0
    assert keypoint2d_ar(mixed, gt, vis) == {5.0: 0.0, 10.0: 0.0, 20.0: 100.0, 30.0: 100.0}


def test_keypoint_ar_ignores_hidden_points():
    gt = np.zeros((1, 11, 2))
    pred = gt.copy()
    pred[0, 0] = (100, 0)
    vis = np.ones((1, 11), bool)
    vis[0, 0] = False
    assert keypoint2d_ar(pred, gt, vis)[5.0] == 100.0


@pytest.fixture(scope="module")
def dataset():
    cfg = DatasetConfig(n_templates=3, samples_per_template=20, seed=1)
    return list(generate_dataset(cfg)), default_template_set(3)


def test_report_perfect(dataset):
    records, templates = dataset
    preds = [Prediction(r.sample_id, r.pose, r.residuals) for r in records]
    rep = build_report(records, preds, templates)
    assert all(v == 0 for v in rep.mae.values())
    assert all(v == 100 for v in rep.ar_3d.values())
    assert all(v == 100 for v in rep.pose_criteria.values())
    assert rep.add == 0
    assert all(v == 100 for v in list(rep.ar_2d_I.values()) + list(rep.ar_2d_Ib.values()))


def test_report_yaw_offset(dataset):
    records, templates = dataset
    preds = []
    for r in records:
        d = r.pose.to_dict()
        d["theta_y"] += 8
        preds.append(Prediction(r.sample_id, Pose8D.from_dict(d), r.residuals))
    rep = build_report(records, preds, templates)
    assert rep.mae["theta_y"] == pytest.approx(8.0, abs=1e-9)
    assert rep.pose_criteria[(5.0, 0.05)] == 0
    assert rep.pose_criteria[(10.0, 0.10)] == 100
    errs = [pose_errors(p.pose.rotation, p.pose.t, r.pose.rotation, r.pose.t).rot_err for p, r in zip(preds, records)]
    assert np.allclose(errs, 8.0, atol=1e-6)


def test_report_errors_and_failures(dataset):
    records, templates = dataset
    with pytest.raises(EvaluationError):
        build_report(records, [], templates)
    preds = [Prediction(r.sample_id, r.pose, r.residuals) for r in records[1:]]
    with pytest.raises(EvaluationError, match=records[0].sample_id):
        build_report(records, preds, templates)
    preds = [Prediction(records[0].sample_id, None, error="boom")] + preds
    rep = build_report(records, preds, templates)
    assert rep.extras["failed"] == 1
    assert rep.ar_3d[0.5] == pytest.approx(100 * 59 / 60)


def test_report_deterministic(dataset):
    records, templates = dataset
    preds = [Prediction(r.sample_id, Pose8D.from_dict({**r.pose.to_dict(), "tx": r.pose.t[0] + 0.05}), r.residuals) for r in records]
    a = build_report(records, preds, templates, iou_mode="mc", mc_samples=20_000)
    b = build_report(records, preds, templates, iou_mode="mc", mc_samples=20_000)
    assert a.to_json_lines() == b.to_json_lines()
    assert a.add == pytest.approx(0.05, abs=1e-12)


def test_angular_diff_used_for_mae_is_symmetric():
    assert angular_diff(350, 10) == angular_diff(10, 350) == 20
