import numpy as np
import pytest
from scipy import ndimage

from bodyfit import kvconfig
from bodyfit.augment import (PrAugConfig, ShapeAugConfig, add_occluding_boxes, augment_pr, augment_shape,
                             jitter_joints, perturb_silhouette_edges, remove_body_parts)
from bodyfit.errors import ParameterError, ParseError
from bodyfit.render import assemble_pr, joint_heatmaps


def blob(rng, size=48):
    """Random union of discs, as a binary silhouette."""
    yy, xx = np.mgrid[:size, :size]
    mask = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(10, size - 10, 2)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(4, 10) ** 2
    return mask.astype(float)


def test_shape_zero_sigma(rng):
    mu = rng.standard_normal(10)
    assert np.array_equal(augment_shape(ShapeAugConfig(mu, np.zeros(10)), rng).beta, mu)


def test_shape_moments():
    rng = np.random.default_rng(0)
    cfg = ShapeAugConfig.default(10, 1.5)
    x = np.array([augment_shape(cfg, rng).beta for _ in range(100_000)])
    var = x.var(axis=0, ddof=1)
    assert np.all((var > 2.1) & (var < 2.4))
    cov = np.cov(x, rowvar=False)
    assert np.abs(cov[~np.eye(10, dtype=bool)]).max() < 0.05


def test_shape_sigma_must_exceed_bank():
    cfg = ShapeAugConfig.default(3, 1.5)
    cfg.check_against_bank(np.random.default_rng(0).normal(0, 0.5, (500, 3)))
    with pytest.raises(ParameterError):
        cfg.check_against_bank(np.random.default_rng(0).normal(0, 2.0, (500, 3)))


def test_jitter(rng):
    j = rng.uniform(0, 64, (17, 2))
    assert np.array_equal(jitter_joints(j, PrAugConfig(joint_jitter_max=0.0), rng), j)
    cfg = PrAugConfig(joint_jitter_max=3.0)
    shifts = np.array([jitter_joints(j, cfg, rng) - j for _ in range(10_000)])
    assert np.abs(shifts).max() <= 3.0
    assert np.abs(shifts.mean(axis=0)).max() < 0.3


def test_edge_noise_trivial_cases(rng):
    s = blob(rng)
    assert np.array_equal(perturb_silhouette_edges(s, PrAugConfig(edge_noise_probability=0.0), rng), s)
    z = np.zeros((20, 20))
    assert np.array_equal(perturb_silhouette_edges(z, PrAugConfig(edge_noise_probability=1.0), rng), z)


def test_edge_noise_stays_near_boundary(rng):
    cfg = PrAugConfig(edge_noise_amplitude=3.0, edge_noise_probability=0.5)
    for _ in range(100):
        s = blob(rng) > 0
        out = perturb_silhouette_edges(s, cfg, rng) > 0
        # distance of each pixel to the nearest pixel of the other label
        dist = np.where(s, ndimage.distance_transform_cdt(s, "taxicab"),
                        ndimage.distance_transform_cdt(~s, "taxicab"))
        far = dist > cfg.edge_noise_amplitude
        assert np.array_equal(out[far], s[far])


def test_part_removal(rng):
    s = blob(rng)
    parts = np.zeros((3,) + s.shape)
    parts[0, :20] = s[:20]
    parts[1, 30:] = s[30:]
    parts[2, 10:15] = s[10:15]
    assert np.array_equal(remove_body_parts(s, parts, PrAugConfig(part_removal_probability=0.0), rng), s)
    all_gone = remove_body_parts(s, parts, PrAugConfig(part_removal_probability=1.0), rng)
    assert np.array_equal(all_gone, s * (parts.max(0) == 0))
    cfg = PrAugConfig(part_removal_probability=0.5)
    for _ in range(50):
        out = remove_body_parts(s, parts, cfg, rng)
        assert out.sum() <= s.sum() and np.all(out <= s)


def test_occluding_boxes(rng):
    s = blob(rng)
    assert np.array_equal(add_occluding_boxes(s, PrAugConfig(occlusion_box_probability=0.0), rng), s)
    huge = PrAugConfig(occlusion_box_probability=1.0, occlusion_box_size_range=(200.0, 200.0),
                       boxes_per_image_max=1)
    assert not add_occluding_boxes(s, huge, rng).any()
    cfg = PrAugConfig(occlusion_box_probability=0.7, occlusion_box_size_range=(5.0, 20.0))
    for _ in range(50):
        out = add_occluding_boxes(s, cfg, rng)
        assert out.sum() <= s.sum() and np.all(out <= s)


def _pr(rng):
    s = blob(rng)
    j = rng.uniform(5, 43, (5, 2))
    return assemble_pr(s, joint_heatmaps(j, 48, 48, 2.0), j, 2.0)


def test_augment_pr_disabled_is_identity(rng):
    pr = _pr(rng)
    out = augment_pr(pr, PrAugConfig.disabled(), np.zeros((0, 48, 48)), rng)
    assert np.array_equal(out.silhouette, pr.silhouette) and np.array_equal(out.heatmaps, pr.heatmaps)


def test_augment_pr_deterministic_and_bounded(rng):
    pr = _pr(rng)
    parts = np.stack([pr.silhouette * (np.arange(48)[:, None] < 24), pr.silhouette * (np.arange(48)[:, None] >= 24)])
    cfg = PrAugConfig().scaled(48)
    a = augment_pr(pr, cfg, parts, np.random.default_rng(5))
    b = augment_pr(pr, cfg, parts, np.random.default_rng(5))
    assert np.array_equal(a.silhouette, b.silhouette) and np.array_equal(a.heatmaps, b.heatmaps)
    amp = int(round(cfg.edge_noise_amplitude))
    grown = ndimage.binary_dilation(pr.silhouette > 0, iterations=amp)
    for seed in range(30):
        out = augment_pr(pr, cfg, parts, np.random.default_rng(seed))
        assert not (out.silhouette > 0)[~grown].any()
        assert out.heatmaps.min() >= 0 and out.heatmaps.max() <= 1


def test_config_validation():
    with pytest.raises(ParameterError):
        PrAugConfig(edge_noise_probability=1.5)
    with pytest.raises(ParameterError):
        PrAugConfig(occlusion_box_size_range=(10.0, 5.0))
    with pytest.raises(ParameterError):
        ShapeAugConfig(np.zeros(3), -np.ones(3))


def test_kv_round_trip_and_unknown_keys(tmp_path):
    cfg = PrAugConfig(joint_jitter_max=2.5, occlusion_box_size_range=(4.0, 9.0), boxes_per_image_max=3)
    kvconfig.save(cfg, tmp_path / "pr.cfg")
    assert kvconfig.load(tmp_path / "pr.cfg", PrAugConfig) == cfg
    (tmp_path / "bad.cfg").write_text("# comment\njoint_jitter_max = 1\nbogus = 2\n")
    with pytest.raises(ParseError, match="bogus") as info:
        kvconfig.load(tmp_path / "bad.cfg", PrAugConfig)
    assert "3" in str(info.value)
    with pytest.raises(ParseError):
        kvconfig.loads("boxes_per_image_max = lots\n", PrAugConfig)
