import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from gearinsert.core import GridIndex, GridMap
from gearinsert.env import (Calibration, ContractViolation, EnvState, GearEnv, RewardParams,
                            descend_and_mesh, discounted_return, discrete_action, offline_config,
                            real_config, reset, reward_fn, step_offline, step_real)

GM = GridMap()
P = RewardParams()
IDENTITY = Calibration()


def null_obs(pos):
    return None


def state_at(x, y):
    return EnvState(pos=np.array([x, y], dtype=float), z=2.0)


def test_reward_examples():
    assert reward_fn(GridIndex(17, 15), GM, P, False, True) == 1.0
    assert reward_fn(GridIndex(0, 0), GM, P, False, False) == pytest.approx(-0.5, abs=1e-12)
    assert reward_fn(GridIndex(17, 15), GM, P, False, False) == pytest.approx(-1 / 140, abs=1e-12)
    assert reward_fn(GridIndex(0, 0), GM, P, True, False) == pytest.approx(-10.5, abs=1e-12)


def test_reward_bounds_exhaustive():
    rewards = {i: reward_fn(i, GM, P, False, False) for i in GM.indices()}
    assert all(-1.0 <= r < 0.0 for r in rewards.values())
    worst = min(rewards.values())
    assert worst == pytest.approx(-0.5)
    # the target sits at (n/2) on a 0..n-1 lattice, so only the origin corner is
    # a full half-map away on both axes
    assert {i for i, r in rewards.items() if r == worst} == {GridIndex(0, 0)}
    assert rewards[GridIndex(34, 29)] == pytest.approx(-(16.5 / 35 + 14 / 30) / 2, abs=1e-12)


def test_reward_monotone_in_manhattan_distance():
    tx, ty = GM.target
    for i in GM.indices():
        r = reward_fn(i, GM, P, False, False)
        for j in (GridIndex(i.col + 1, i.row), GridIndex(i.col, i.row + 1)):
            if j.col >= GM.n_cols or j.row >= GM.n_rows:
                continue
            if abs(j.col - tx) >= abs(i.col - tx) and abs(j.row - ty) >= abs(i.row - ty):
                assert reward_fn(j, GM, P, False, False) <= r


def test_offline_step_examples():
    cfg = offline_config()
    res = step_offline(state_at(17, 14), discrete_action("y", 1), cfg, null_obs)
    assert res.info["success"] and res.reward == 1.0 and res.done
    res = step_offline(state_at(0, 0), discrete_action("x", -5), cfg, null_obs)
    assert res.info["out_of_bounds"] and res.done
    assert res.reward == pytest.approx(-10.5)
    res = step_offline(state_at(10, 10), np.array([2.4, 0.0]), cfg, null_obs)
    assert res.info["snapped"] == GridIndex(12, 10)
    np.testing.assert_array_equal(res.state.pos, [12.0, 10.0])


def test_terminal_step_is_contract_violation():
    s = state_at(1, 1)
    s.done = True
    with pytest.raises(ContractViolation):
        step_offline(s, 0, offline_config(), null_obs)
    with pytest.raises(ContractViolation):
        step_real(s, 0, real_config(), null_obs)


def test_max_steps_ends_episode():
    cfg = offline_config(max_steps=3)
    s = state_at(5, 5)
    for k in range(3):
        res = step_offline(s, discrete_action("x", 1 if k % 2 == 0 else -1), cfg, null_obs)
        s = res.state
    assert res.done and not res.info["success"]


def test_reset_reproducible_and_outside_success(offline_cfg):
    a, _ = reset(offline_cfg, np.random.default_rng(3), null_obs)
    b, _ = reset(offline_cfg, np.random.default_rng(3), null_obs)
    np.testing.assert_array_equal(a.pos, b.pos)
    rng = np.random.default_rng(0)
    counts = np.zeros((GM.n_rows, GM.n_cols), int)
    for _ in range(10_000):
        s, _ = reset(offline_cfg, rng, null_obs)
        c, r = int(s.pos[0]), int(s.pos[1])
        assert GridIndex(c, r) not in GM.target_cells() and s.t == 0 and not s.seated
        counts[r, c] += 1
    flat = np.array([counts[i.row, i.col] for i in GM.indices() if i not in GM.target_cells()])
    assert chisquare(flat).pvalue > 1e-3


def test_real_reset_outside_tolerance(real_cfg):
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        s, _ = reset(real_cfg, rng, null_obs)
        assert np.linalg.norm(s.pos - real_cfg.peg_mm) > real_cfg.tolerance_mm


def test_real_step_examples():
    cfg = real_config(calibration=IDENTITY)
    peg = cfg.peg_mm
    res = step_real(EnvState(peg + [0.2, 0.0], 2.0), np.array([-0.2, 0.0]), cfg, null_obs)
    assert res.info["success"] and res.reward == 1.0 and res.state.seated
    np.testing.assert_allclose(res.state.pos, peg, atol=1e-12)
    rot = real_config(calibration=Calibration(rot_deg=90.0))
    res = step_real(state_at(5, 5), np.array([1.0, 0.0]), rot, null_obs)
    np.testing.assert_allclose(res.state.pos - [5, 5], [0.0, 1.0], atol=1e-12)
    res = step_real(state_at(33, 5), np.array([5.0, 0.0]), cfg, null_obs)
    assert res.info["out_of_bounds"] and res.done and res.reward == 0.0


@given(st.floats(0.5, 33.5), st.floats(0.5, 28.5), st.floats(-5, 5), st.floats(-5, 5))
def test_real_nonsuccess_inbounds_reward_zero(x, y, dx, dy):
    cfg = real_config()
    res = step_real(state_at(x, y), np.array([dx, dy]), cfg, null_obs)
    if not res.info["success"]:
        assert res.reward == 0.0


def test_translation_cancels_in_displacement():
    # a rigid offset moves both setpoints equally, so only the rotation acts on a move
    cal = Calibration(rot_deg=0.0, trans=(2.0, 1.0))
    cfg = real_config(calibration=cal)
    res = step_real(state_at(5, 5), np.array([1.0, 0.0]), cfg, null_obs)
    np.testing.assert_allclose(res.state.pos, [6.0, 5.0], atol=1e-12)


@given(st.lists(st.integers(0, 7), min_size=1, max_size=30), st.integers(0, 1047))
def test_identity_real_matches_offline_on_grid(actions, start_i):
    allowed = [i for i in GM.indices() if i not in GM.target_cells()]
    start = GM.coords(allowed[start_i])
    off = GearEnv(offline_config(), null_obs)
    real = GearEnv(real_config(calibration=IDENTITY, tolerance_mm=0.5), null_obs)
    off.reset(start=start)
    real.reset(start=start)
    for a in actions:
        r1, r2 = off.step(a), real.step(a)
        if r1.info["out_of_bounds"]:
            assert r2.info["out_of_bounds"]
            break
        np.testing.assert_allclose(r1.state.pos, r2.state.pos, atol=1e-12)
        assert r1.info["success"] == r2.info["success"]
        if r1.done:
            break


def test_offline_env_bit_reproducible(offline_cfg, obs_source):
    def run():
        env = GearEnv(offline_cfg, obs_source)
        env.reset(np.random.default_rng(9))
        rng = np.random.default_rng(4)
        out = []
        for _ in range(40):
            res = env.step(int(rng.integers(8)))
            out.append((res.obs.tobytes(), res.reward, res.done))
            if res.done:
                env.reset(np.random.default_rng(len(out)))
        return out
    assert run() == run()


def test_descend_and_mesh():
    cfg = real_config()
    s = state_at(17.5, 15.0)
    s.seated = True
    out = descend_and_mesh(s, cfg)
    assert out.success and out.final_z == cfg.insert_z_mm
    assert out.rotation_deg == pytest.approx(9.0)
    with pytest.raises(ContractViolation):
        descend_and_mesh(state_at(1, 1), cfg)


@given(st.lists(st.floats(-11, 1), max_size=40), st.floats(0, 1))
def test_discounted_return_matches_direct_sum(rewards, gamma):
    direct = sum(r * gamma ** k for k, r in enumerate(rewards))
    assert discounted_return(rewards, gamma) == pytest.approx(direct, abs=1e-12)


def test_bad_actions_rejected():
    with pytest.raises(ValueError):
        step_offline(state_at(1, 1), 8, offline_config(), null_obs)
    with pytest.raises(ValueError):
        step_offline(state_at(1, 1), np.array([np.nan, 0.0]), offline_config(), null_obs)


def test_continuous_action_is_clamped():
    res = step_offline(state_at(10, 10), np.array([9.0, -9.0]), offline_config(), null_obs)
    np.testing.assert_array_equal(res.state.pos, [15.0, 5.0])


def test_dataset_backed_observations_match_renderer(tmp_path):
    from gearinsert.render import render_grid_dataset
    gm = GridMap(n_cols=4, n_rows=3)
    render_grid_dataset(gm, offline_config().scene, tmp_path)
    rendered = GearEnv(offline_config(map=gm))
    loaded = GearEnv(offline_config(map=gm, dataset_dir=str(tmp_path)))
    for idx in gm.indices():
        p = gm.coords(idx)
        assert np.array_equal(rendered.reset(start=p), loaded.reset(start=p))
