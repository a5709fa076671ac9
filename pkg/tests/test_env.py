import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import consensus_instance, tables
from matrpo.env import (ACTION_FORCES, EpisodeDoneError, MatrixGame, NavigationConfig, ParticleWorld,
                        matrix_game_exact_surrogate)

STAY, RIGHT = 4, 1


def world(n=3, envs=1, **kw):
    return ParticleWorld(NavigationConfig(n_agents=n, **kw), n_envs=envs)


def test_reset_deterministic_and_shapes():
    for n in (1, 2, 3, 5):
        env = world(n, envs=4)
        a = env.reset(np.random.default_rng(0))
        b = env.reset(np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4, n, 4 + 2 * (n - 1) + 2 * n)
        assert env.obs_dims == [4 + 2 * (n - 1) + 2 * n] * n
        assert np.all(env.vel == 0)


def test_initial_positions_uniform():
    env = world(3, envs=10_000)
    env.reset(np.random.default_rng(1))
    assert np.all(np.abs(env.pos.mean(axis=(0, 1))) < 0.02)
    assert np.all(np.abs(env.landmarks.mean(axis=(0, 1))) < 0.02)
    assert env.pos.min() >= -1.0 and env.pos.max() <= 1.0


def test_observation_layout():
    env = world(3)
    pos = [[0.0, 0.0], [0.5, 0.0], [0.0, -0.5]]
    marks = [[1.0, 1.0], [-1.0, 0.0], [0.2, 0.3]]
    obs = env.set_state(pos, np.zeros((3, 2)), marks)[0]
    o1 = obs[1]
    np.testing.assert_allclose(o1[:2], [0.5, 0.0])
    np.testing.assert_allclose(o1[2:4], [0.0, 0.0])
    np.testing.assert_allclose(o1[4:8], [-0.5, 0.0, -0.5, -0.5])  # other agents, relative
    np.testing.assert_allclose(o1[8:], [0.5, 1.0, -1.5, 0.0, -0.3, 0.3])  # landmarks, relative


def test_statics_and_rewards():
    env = world(3)
    pos = np.array([[0.0, 0.0], [0.8, 0.0], [0.0, 0.8]])
    marks = np.array([[0.0, 0.5], [0.8, 0.3], [-0.5, -0.5]])
    env.set_state(pos, np.zeros((3, 2)), marks)
    _, r, done = env.step(np.full(3, STAY))
    np.testing.assert_array_equal(env.pos[0], pos)
    d = np.linalg.norm(pos[:, None] - marks[None], axis=-1).min(axis=0).sum()
    np.testing.assert_allclose(r[0], [-d, 0.0, 0.0], atol=1e-15)
    assert not done


def test_collision_penalty_symmetric():
    env = world(3)
    pos = np.array([[0.0, 0.0], [0.1, 0.0], [0.9, 0.9]])
    marks = pos.copy()
    env.set_state(pos, np.zeros((3, 2)), marks)
    _, r, _ = env.step(np.array([0, 2, STAY]))
    assert r[0, 1] == -1.0 and r[0, 2] == 0.0
    assert r[0, 0] < 0.0
    np.testing.assert_array_equal(env.collisions()[0], [1, 1, 0])


def test_velocity_limit():
    cfg = NavigationConfig(n_agents=1)
    env = ParticleWorld(cfg)
    env.reset(np.random.default_rng(0))
    for _ in range(100):
        env.step(np.array([RIGHT]))
    limit = cfg.force * cfg.dt / cfg.damping
    assert abs(env.vel[0, 0, 0] - limit) / limit < 0.01
    assert env.vel[0, 0, 1] == 0.0


def test_physics_update_rule():
    env = world(2)
    env.set_state([[0.0, 0.0], [0.5, 0.5]], [[0.2, -0.1], [0.0, 0.0]], np.zeros((2, 2)))
    env.step(np.array([2, 3]))
    v0 = 0.75 * np.array([0.2, -0.1]) + 0.1 * ACTION_FORCES[2]
    np.testing.assert_allclose(env.vel[0, 0], v0, atol=1e-15)
    np.testing.assert_allclose(env.pos[0, 0], 0.1 * v0, atol=1e-15)
    np.testing.assert_allclose(env.vel[0, 1], [0.0, -0.1], atol=1e-15)


def test_step_after_done_rejected():
    env = world(2, horizon=3)
    env.reset(np.random.default_rng(0))
    dones = [env.step(np.zeros(2, dtype=int))[2] for _ in range(3)]
    assert dones == [False, False, True]
    with pytest.raises(EpisodeDoneError):
        env.step(np.zeros(2, dtype=int))
    with pytest.raises(EpisodeDoneError):
        world(2).step(np.zeros(2, dtype=int))
    env = world(2)
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(np.array([5, 0]))


def test_physics_determinism():
    def rollout():
        env = world(3, envs=2)
        env.reset(np.random.default_rng(3))
        rng = np.random.default_rng(4)
        return np.stack([env.step(rng.integers(0, 5, size=(2, 3)))[0] for _ in range(20)])

    assert rollout().tobytes() == rollout().tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), steps=st.integers(1, 60))
def test_velocity_bounded_and_positions_finite(seed, steps):
    cfg = NavigationConfig(n_agents=3)
    env = ParticleWorld(cfg, n_envs=2)
    env.reset(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for _ in range(steps):
        env.step(rng.integers(0, 5, size=(2, 3)))
    assert np.all(np.abs(env.vel) <= cfg.force * cfg.dt / cfg.damping + 1e-12)
    assert np.all(np.isfinite(env.pos))


def test_matrix_game_step_and_shapes():
    game = MatrixGame(np.arange(8, dtype=float).reshape(2, 2, 2), n_envs=2)
    obs = game.reset()
    assert obs.shape == (2, 2, 1) and np.all(obs == 1.0)
    _, r, done = game.step(np.array([[0, 1], [1, 1]]))
    np.testing.assert_array_equal(r, [[1.0, 5.0], [3.0, 7.0]])
    assert done
    with pytest.raises(EpisodeDoneError):
        game.step(np.array([[0, 0], [0, 0]]))
    with pytest.raises(ValueError):
        MatrixGame(np.zeros((2, 2)))


def test_surrogate_identity_policy():
    rng = np.random.default_rng(5)
    game = MatrixGame.random(2, 2, rng)
    old = [tables(rng, 2, 2), tables(rng, 2, 2)]
    old[1][1] = old[0][1]  # irrelevant heads may differ; keep one shared for variety
    c, s = matrix_game_exact_surrogate(game, old, old)
    # with pi = pi_old both sides equal E[A] = 0 under centred advantages
    assert abs(c) < 1e-12 and abs(s) < 1e-12


def test_surrogates_agree_under_consensus():
    rng = np.random.default_rng(6)
    for n_agents in (2, 3):
        for _ in range(20):
            game, old, new = consensus_instance(rng, n_agents, 2)
            c, s = matrix_game_exact_surrogate(game, old, new)
            assert abs(c - s) < 1e-12


def test_surrogates_differ_when_consensus_violated():
    rng = np.random.default_rng(7)
    for _ in range(20):
        game, old, new = consensus_instance(rng, 2, 2)
        new[1][0] = rng.dirichlet(np.ones(2))
        c, s = matrix_game_exact_surrogate(game, old, new)
        assert abs(c - s) > 1e-6


def test_surrogates_agree_with_distinct_old_heads():
    # 3-action heads: agent i's old head n may differ from agent n's own head as long
    # as the ratio r_n stays normalisable, i.e. p . r_n = 1 and sum(p) = 1
    rng = np.random.default_rng(8)
    for _ in range(20):
        n_agents, k = 2, 3
        game = MatrixGame.random(n_agents, k, rng)
        own_old, own_new = tables(rng, n_agents, k), tables(rng, n_agents, k)
        old, new = [], []
        for i in range(n_agents):
            row_old, row_new = [], []
            for n in range(n_agents):
                r = own_new[n] / own_old[n]
                d = np.cross(r, np.ones(k))
                t = 0.5 * np.min(own_old[n] / np.abs(d).max())
                p = own_old[n] + (t if i != n else 0.0) * d
                row_old.append(p)
                row_new.append(p * r)
            old.append(row_old)
            new.append(row_new)
        assert not np.allclose(old[0][1], old[1][1])
        for tbl in (old, new):
            for row in tbl:
                for p in row:
                    assert abs(p.sum() - 1) < 1e-12 and p.min() > 0
        c, s = matrix_game_exact_surrogate(game, old, new)
        assert abs(c - s) < 1e-12
