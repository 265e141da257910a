import numpy as np
import pytest
from scipy.linalg import orthogonal_procrustes
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from bodyfit.body_model import ShapeParams, neutral_mesh
from bodyfit.errors import NumericError, ParameterError
from bodyfit.metrics import (MetricsReport, apply_similarity, mpjpe_pa, procrustes_align, pve_t_sc,
                             scale_corrected_error, silhouette_miou)


def random_similarity(rng):
    return rng.uniform(0.3, 3.0), Rotation.random(random_state=rng).as_matrix(), rng.normal(0, 2, 3)


def test_procrustes_identity(rng):
    P = rng.standard_normal((10, 3))
    s, R, t = procrustes_align(P, P)
    assert s == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_procrustes_recovers_known_transform(rng):
    for _ in range(20):
        P = rng.standard_normal((14, 3))
        R0 = Rotation.random(random_state=rng).as_matrix()
        c = rng.normal(0, 3, 3)
        s, R, t = procrustes_align(P, 2 * P @ R0 + c)
        assert s == pytest.approx(2.0, abs=1e-9)
        np.testing.assert_allclose(R, R0, atol=1e-9)
        np.testing.assert_allclose(t, c, atol=1e-9)


def test_procrustes_beats_random_transforms(rng):
    P = rng.standard_normal((14, 3))
    Q = P @ Rotation.random(random_state=rng).as_matrix() * 1.3 + rng.normal(0, 0.2, (14, 3))
    best = np.sum((apply_similarity(P, *procrustes_align(P, Q)) - Q) ** 2)
    for _ in range(1000):
        assert best <= np.sum((apply_similarity(P, *random_similarity(rng)) - Q) ** 2)


def test_procrustes_is_proper_rotation(rng):
    P = rng.standard_normal((8, 3))
    s, R, _ = procrustes_align(P, P * [1, 1, -1])  # a reflection is the unconstrained optimum
    assert np.linalg.det(R) == pytest.approx(1.0) and s > 0


def test_procrustes_degenerate_inputs():
    with pytest.raises(NumericError):
        procrustes_align(np.ones((5, 3)), np.zeros((5, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(NumericError):
        procrustes_align(line, line)
    with pytest.raises(ParameterError):
        procrustes_align(np.zeros((5, 3)), np.zeros((4, 3)))


def test_mpjpe_similarity_invariance(rng):
    gt = rng.standard_normal((24, 3)) * 0.3
    assert mpjpe_pa(gt, gt) < 1e-9
    for _ in range(50):
        assert mpjpe_pa(apply_similarity(gt, *random_similarity(rng)), gt) < 1e-9


def test_mpjpe_single_joint_offset(rng):
    gt = rng.standard_normal((14, 3)) * 0.3
    pred = gt.copy()
    pred[3, 0] += 0.010
    v = mpjpe_pa(pred, gt)
    assert v > 0
    # least squares bounds the aligned RMS by the unaligned one; the mean of norms can exceed 10/14
    aligned_pred = apply_similarity(pred, *procrustes_align(pred, gt))
    assert 1000 * np.sqrt(((aligned_pred - gt) ** 2).sum(1).mean()) <= 10 / np.sqrt(14)
    # recompute with an independent closed-form alignment
    mp, mg = pred.mean(0), gt.mean(0)
    R, sv = orthogonal_procrustes(pred - mp, gt - mg)
    s = sv / ((pred - mp) ** 2).sum()
    aligned = s * (pred - mp) @ R + mg
    assert v == pytest.approx(1000 * np.linalg.norm(aligned - gt, axis=1).mean(), rel=1e-9)


def test_pve_zero_and_scale_invariance(model, rng):
    beta = rng.standard_normal(10)
    assert pve_t_sc(beta, beta, model) == 0.0
    gt = neutral_mesh(model, ShapeParams(beta))
    c = gt.mean(0)
    assert scale_corrected_error(1.1 * (gt - c) + c, gt) < 1e-9
    assert scale_corrected_error(0.7 * gt + [0.3, -1, 2], gt) < 1e-9


def test_pve_not_rotation_invariant(model):
    gt = neutral_mesh(model, ShapeParams(np.zeros(10)))
    rot = gt @ Rotation.from_euler("y", 0.5).as_matrix().T
    assert scale_corrected_error(rot, gt) > 1.0


def test_pve_matches_golden_section_oracle(model, rng):
    for _ in range(5):
        a, b = rng.normal(0, 1.5, 10), rng.normal(0, 1.5, 10)
        p = neutral_mesh(model, ShapeParams(a))
        g = neutral_mesh(model, ShapeParams(b))
        p, g = p - p.mean(0), g - g.mean(0)
        s = minimize_scalar(lambda s: ((s * p - g) ** 2).sum(), bracket=(0.1, 10), method="golden",
                            tol=1e-12).x
        oracle = 1000 * np.linalg.norm(s * p - g, axis=1).mean()
        assert pve_t_sc(a, b, model) == pytest.approx(oracle, rel=1e-6)


def test_miou_cases(rng):
    a = np.zeros((6, 6))
    b = np.zeros((6, 6))
    a[1:3, 1:3] = 1
    b[1:3, 2:4] = 1
    assert silhouette_miou(a, b) == pytest.approx(2 / 6)
    assert silhouette_miou(a, a) == 1.0
    c = np.zeros((6, 6))
    c[4:, 4:] = 1
    assert silhouette_miou(a, c) == 0.0
    for _ in range(20):
        x, y = rng.random((2, 10, 10)) > 0.5
        assert silhouette_miou(x, y) == silhouette_miou(y, x)
    with pytest.raises(ParameterError):
        silhouette_miou(a, np.zeros((5, 5)))


def test_report_round_trips(tmp_path):
    rep = MetricsReport()
    rep.add("a", 10.0, 5.5, 0.75)
    rep.add("b", 20.0, None, 0.25)
    json_path, csv_path = rep.save(tmp_path / "m.json")
    assert len(rep) == 2
    m = rep.means()
    assert m == {"mpjpe_pa": 15.0, "pve_t_sc": 5.5, "miou": 0.5}
    for back in (MetricsReport.load_json(json_path), MetricsReport.load_csv(csv_path)):
        assert back.ids == ["a", "b"] and back.means() == m
    assert "15.00" in rep.table()
