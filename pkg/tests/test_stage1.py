import numpy as np
import pytest

from gearinsert.core import CameraIntrinsics, GridMap, SeedSpec, project
from gearinsert.env import ContractViolation
from gearinsert.stage1 import (BBoxObservation, ContactParams, ContactTimeout, NoiseModel,
                               Stage1Config, descend_until_contact, localize_peg,
                               max_descent_steps, stage2_start)

K = CameraIntrinsics()
PEG = np.array([0.01, -0.02, 0.5])
OFFSET = np.array([0.015, 0.01, 0.0])
GM = GridMap()


def test_zero_noise_recovers_peg():
    est = localize_peg(PEG, K, NoiseModel(0.0, 0.0), np.random.default_rng(0), OFFSET)
    np.testing.assert_allclose(est, PEG, atol=1e-12)


def test_lateral_error_std_matches_linearisation():
    rng = SeedSpec(0).stream(1)
    errs = np.array([localize_peg(PEG, K, NoiseModel(4.0, 0.0), rng, OFFSET) - PEG
                     for _ in range(10_000)])
    expected = 4.0 * 0.5 / 600.0
    for axis in (0, 1):
        assert errs[:, axis].std() == pytest.approx(expected, rel=0.10)


def test_depth_only_noise():
    rng = SeedSpec(0).stream(2)
    errs = np.array([localize_peg(PEG, K, NoiseModel(0.0, 0.003), rng, OFFSET) - PEG
                     for _ in range(10_000)])
    assert errs[:, 2].std() == pytest.approx(0.003, rel=0.05)


def test_default_noise_keeps_starts_on_map():
    rng = SeedSpec(0).stream(3)
    inside = 0
    for _ in range(10_000):
        est = localize_peg(PEG, K, NoiseModel(), rng, OFFSET)
        err = (est[:2] - PEG[:2]) * 1000.0
        p = GM.target_mm + err
        inside += bool(np.all(p >= 0) and np.all(p <= GM.extent_mm))
    assert inside >= 9_900


@pytest.mark.parametrize("thr, z, fz", [(2.0, -2.5, 2.5), (0.1, -0.5, 0.5)])
def test_contact_examples(thr, z, fz):
    c = ContactParams(f_z_threshold=thr, stiffness=1.0, descent_step=0.5)
    got_z, got_fz, steps = descend_until_contact(10.0, c)
    assert got_z == pytest.approx(z) and got_fz == pytest.approx(fz)
    assert steps <= max_descent_steps(10.0, c)


def test_contact_precondition_and_timeout():
    with pytest.raises(ContractViolation):
        descend_until_contact(-1.0, ContactParams())
    # surface far below reach: the force threshold is never crossed
    with pytest.raises(ContactTimeout):
        descend_until_contact(30.0, ContactParams(surface_z=-1e6, max_steps=50))


@pytest.mark.parametrize("start_z", [0.3, 1.0, 7.7, 30.0])
@pytest.mark.parametrize("step", [0.1, 0.5, 0.7])
def test_descent_step_bound(start_z, step):
    c = ContactParams(descent_step=step)
    assert descend_until_contact(start_z, c)[2] <= max_descent_steps(start_z, c)


def test_stage2_start_mapping():
    np.testing.assert_allclose(stage2_start([100, 50], [100, 50], GM), GM.target_mm)
    np.testing.assert_allclose(stage2_start([100, 50], [105, 47], GM), GM.target_mm + [5, -3])
    np.testing.assert_allclose(stage2_start([0, 0], [100, 0], GM), [34.0, 15.0])


def test_bbox_validation_and_defaults():
    with pytest.raises(ValueError):
        BBoxObservation(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        NoiseModel(sigma_px=-1.0)
    cfg = Stage1Config()
    u, v, _ = project(np.asarray(cfg.true_peg_m) + cfg.platform_offset_m, cfg.camera)
    assert 0 <= u <= 640 and 0 <= v <= 480
