import csv

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from tissue_isp.env import EnvConfig, EpisodeSpec, IspEnv, augment, reward, trace_row, write_trace_csv
from tissue_isp.errors import ConfigError, DegenerateEpisode
from tissue_isp.fem import SolverConfig
from tissue_isp.mesh import build_square_mesh


@pytest.fixture(scope="module")
def mesh11():
    return build_square_mesh(100.0, 11)


def make_env(mesh, seed=0, **kw):
    solver = kw.pop("solver", None)
    return IspEnv(EnvConfig(**kw), mesh, solver=solver, seed=seed)


# -- config -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"n_controlled": 0},
        {"episode_length": 0},
        {"max_action_per_axis": 0.0},
        {"augmentation_K": 0},
        {"young_range": (1.2, 0.6)},
        {"young_range": (0.0, 1.0)},
        {"dimension": 3},
        {"n_grasped": 3},
    ],
)
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        EnvConfig(**kw)


def test_dims():
    assert EnvConfig().obs_dim == 4
    assert EnvConfig(augmentation_K=5).obs_dim == 20
    assert EnvConfig().action_dim == 4


# -- reward ----------------------------------------------------------------------


def test_reward_examples():
    p0 = np.array([[0.0, 0.0], [5.0, 5.0]])
    pd = np.array([[4.0, 0.0], [5.0, 9.0]])
    assert reward(pd, p0, pd, 12.0) == 12.0
    assert reward(p0, p0, pd, 12.0) == 0.0
    # stacked error shrunk to a quarter
    pt = pd + (p0 - pd) / 4
    assert reward(pt, p0, pd, 12.0) == pytest.approx(6.0, abs=1e-12)


def test_reward_degenerate():
    p = np.ones((2, 2))
    with pytest.raises(DegenerateEpisode):
        reward(p, p, p, 12.0)


@given(a=st.floats(0.0, 50.0), b=st.floats(0.0, 50.0))
@settings(max_examples=200, deadline=None)
def test_reward_decreasing_in_error(a, b):
    pd = np.zeros(4)
    p0 = np.array([4.0, 0.0, 0.0, 4.0])
    u = np.array([0.6, 0.0, 0.0, 0.8])
    # below ~1e-12 mm the square root no longer changes 1 - sqrt(.) in float64
    assume(abs(a - b) > 1e-9)
    ra, rb = reward(a * u, p0, pd, 12.0), reward(b * u, p0, pd, 12.0)
    if a < b:
        assert ra > rb
    elif a > b:
        assert ra < rb


# -- augmentation ------------------------------------------------------------------


def test_augment_k1_passthrough():
    e = np.array([1.0, -2.0, 3.0, 0.5])
    obs = augment(e, [])
    np.testing.assert_array_equal(obs.as_array(), e)


def test_augment_length():
    obs = augment(np.zeros(4), [np.zeros(4)] * 4)
    assert len(obs) == 20
    assert obs.as_array().shape == (20,)


# -- reset -------------------------------------------------------------------------


def test_reset_deterministic(mesh11):
    specs = []
    for _ in range(2):
        env = make_env(mesh11, seed=42)
        _, s = env.reset()
        specs.append(s.to_dict())
    assert specs[0] == specs[1]


def test_reset_spec_invariants(mesh11):
    env = make_env(mesh11, seed=3)
    for _ in range(200):
        obs, spec = env.reset()
        assert set(spec.controlled_nodes) <= mesh11.interior_nodes
        assert len(set(spec.controlled_nodes)) == 2
        assert spec.grasp_nodes[0] in mesh11.left_candidates
        assert spec.grasp_nodes[1] in mesh11.right_candidates
        p0 = mesh11.node_positions[list(spec.controlled_nodes)]
        d = np.linalg.norm(spec.desired_positions - p0, axis=1)
        np.testing.assert_allclose(d, 4.0, atol=1e-9)
        assert np.linalg.norm(spec.desired_positions[0] - spec.desired_positions[1]) >= 2.0
        assert np.all(spec.desired_positions > 0) and np.all(spec.desired_positions < 100.0)
        assert np.linalg.norm(obs.error_vector) == pytest.approx(np.linalg.norm(p0 - spec.desired_positions))


def test_young_modulus_uniform(mesh11):
    env = make_env(mesh11, seed=11)
    draws = np.array([env.reset()[1].young_modulus_drawn for _ in range(10_000)])
    res = stats.kstest(draws, stats.uniform(loc=0.6, scale=0.6).cdf)
    assert res.statistic < 0.02
    assert draws.min() >= 0.6 and draws.max() <= 1.2


def test_fixed_spec_roundtrip(mesh11):
    env = make_env(mesh11, seed=5)
    _, spec = env.reset()
    spec2 = EpisodeSpec.from_dict(spec.to_dict())
    _, got = env.reset(fixed_spec=spec2)
    assert got.to_dict() == spec.to_dict()


def test_fixed_spec_validation(mesh11):
    env = make_env(mesh11, seed=5)
    _, spec = env.reset()
    bad = EpisodeSpec(spec.controlled_nodes, spec.desired_positions, (0, spec.grasp_nodes[1]), 0.9)
    with pytest.raises(ConfigError):
        env.reset(fixed_spec=bad)
    p0 = mesh11.node_positions[list(spec.controlled_nodes)]
    with pytest.raises(DegenerateEpisode):
        env.reset(fixed_spec=EpisodeSpec(spec.controlled_nodes, p0, spec.grasp_nodes, 0.9))


# -- stepping ----------------------------------------------------------------------


def test_clamp(mesh11):
    env = make_env(mesh11)
    env.reset()
    np.testing.assert_array_equal(env.clamp([0.5, 0, 0, 0]), [0.2, 0, 0, 0])
    np.testing.assert_array_equal(env.clamp([-3, 0.1, 0, 0.2]), [-0.2, 0.1, 0, 0.2])
    with pytest.raises(ConfigError):
        env.clamp([0.1, 0.1])


def test_clamped_action_moves_target(mesh11):
    env = make_env(mesh11, seed=1)
    env.reset()
    k = env.spec.grasp_nodes[0]
    before = env.state.grasp_targets[k].copy()
    env.step([0.5, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(env.state.grasp_targets[k] - before, [0.2, 0.0])


def test_zero_action_zero_reward(mesh11):
    env = make_env(mesh11, seed=2)
    env.reset()
    res = env.step(np.zeros(4))
    assert res.reward == 0.0
    assert not res.done


def test_history_after_first_step(mesh11):
    env = make_env(mesh11, seed=2, augmentation_K=5)
    obs, _ = env.reset()
    assert obs.as_array().shape == (20,)
    np.testing.assert_array_equal(obs.action_history, 0.0)
    res = env.step([0.5, -0.1, 0.0, 0.05])
    h = res.observation.action_history.reshape(4, 4)
    np.testing.assert_array_equal(h[0], [0.2, -0.1, 0.0, 0.05])
    np.testing.assert_array_equal(h[1:], 0.0)
    res = env.step([0.0, 0.0, 0.1, 0.0])
    h = res.observation.action_history.reshape(4, 4)
    np.testing.assert_array_equal(h[0], [0.0, 0.0, 0.1, 0.0])
    np.testing.assert_array_equal(h[1], [0.2, -0.1, 0.0, 0.05])


def test_done_at_episode_length(mesh11):
    env = make_env(mesh11, seed=4, episode_length=3)
    env.reset()
    flags = [env.step(np.zeros(4)).done for _ in range(3)]
    assert flags == [False, False, True]
    with pytest.raises(RuntimeError):
        env.step(np.zeros(4))


def test_early_stop_only_when_configured(mesh11):
    env = make_env(mesh11, seed=4, early_stop_reward=-1e9)
    env.reset()
    res = env.step(np.zeros(4))
    assert res.done and res.early_stopped


def test_replay_bit_identical(mesh11):
    rng = np.random.default_rng(9)
    actions = rng.uniform(-0.3, 0.3, size=(15, 4))
    runs = []
    for _ in range(2):
        env = make_env(mesh11, seed=77, augmentation_K=3)
        obs, _ = env.reset()
        traj = [obs.as_array()]
        for a in actions:
            r = env.step(a)
            traj.append(r.observation.as_array())
            traj.append(np.array([r.reward]))
        runs.append(np.concatenate(traj))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_grasp_tracks_target_when_converged(mesh11):
    solver = SolverConfig(max_cg_iterations=2000)
    env = make_env(mesh11, seed=8, solver=solver)
    env.reset()
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        r = env.step(rng.uniform(-0.2, 0.2, 4))
        if r.solver_report.converged:
            checked += 1
            for k in env.spec.grasp_nodes:
                gap = np.abs(env.state.positions[k] - env.state.grasp_targets[k])
                assert np.all(gap <= 2 * 0.2)
        assert len(r.observation) == 4
    assert checked > 0


def test_divergence_terminates(mesh11, monkeypatch):
    import tissue_isp.env as env_mod
    from tissue_isp.errors import SimulationDiverged

    env = make_env(mesh11, seed=1)
    env.reset()
    snapshot = env.state.copy()

    def boom(state, *a, **k):
        raise SimulationDiverged("forced", last_state=snapshot)

    monkeypatch.setattr(env_mod, "step", boom)
    res = env.step(np.zeros(4))
    assert res.diverged and res.done
    assert res.reward == -12.0


def test_trace_csv(mesh11, tmp_path):
    env = make_env(mesh11, seed=1)
    env.reset()
    rows = []
    for t in range(3):
        r = env.step([0.1, 0.0, -0.1, 0.0])
        rows.append(trace_row(t, r, env))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, rows)
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 3
    assert list(got[0])[:3] == ["step", "reward", "error_norm_mm"]
    assert "cg_converged" in got[0] and "err1_y" in got[0]
    assert float(got[2]["reward"]) == rows[2]["reward"]
