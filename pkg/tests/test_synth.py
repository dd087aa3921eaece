import numpy as np
import pytest

from tdex.ingest import SubsampleConfig, motion_subsample
from tdex.synth import (
    TASKS, ContactWorld, ExpertPolicy, InitialState, RandomPolicy, clustered_tactile,
    contact_fraction, evaluate, generate_demos, generate_play, initial_states, make_layout,
    task_spec,
)


def contact_env(spec, variant_index, seed=0):
    layout = make_layout(spec)
    xy = layout.positions[0]
    init = InitialState(0, tuple(xy), variant_index, (xy[0], xy[1], 0.0))
    return ContactWorld(spec, init, seed=seed, layout=layout)


def test_task_lookup():
    assert task_spec("synth:lift") is TASKS["lift"]
    assert task_spec("bottle").task == "bottle"
    with pytest.raises(KeyError):
        task_spec("synth:pour")


def test_play_is_deterministic_and_contact_rich():
    spec = TASKS["lift"]
    a = generate_play(spec, minutes_equivalent=2.0, seed=4)
    b = generate_play(spec, minutes_equivalent=2.0, seed=4)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.tactile.tobytes() == y.tactile.tobytes()
        assert x.actions.tobytes() == y.actions.tobytes()
    assert sum(len(t) for t in a) == 1200
    assert contact_fraction(a) >= 0.30


def test_approach_frames_have_zero_tactile():
    play = generate_play(TASKS["lift"], minutes_equivalent=1.0, seed=0)
    for traj in play:
        approach = np.array([p == "approach" for p in traj.meta["phase"]])
        assert not traj.tactile[approach].any()
        assert traj.tactile[~approach].any() or not (~approach).any()


@pytest.mark.parametrize("task", sorted(TASKS))
def test_demos_succeed_and_subsample_nontrivially(task):
    spec = TASKS[task]
    demos = generate_demos(spec, seed=1)
    assert len(demos) == 6
    for d in demos:
        kept = motion_subsample(d, SubsampleConfig(0.02))
        assert 1 < len(kept) < len(d)
        assert d.actions.shape == (len(d), 23)


@pytest.mark.parametrize("task", sorted(TASKS))
def test_expert_and_random_success(task):
    spec = TASKS[task]
    expert = evaluate(lambda env: ExpertPolicy(env), spec, episodes=20, seed=3)
    random = evaluate(lambda env: RandomPolicy(spec, seed=7), spec, episodes=20, seed=3)
    assert expert["success_rate"] == 1.0
    assert random["success_rate"] <= 0.10


def test_initial_states_shared_and_deterministic():
    spec = TASKS["lift"]
    assert initial_states(spec, 10, 5) == initial_states(spec, 10, 5)
    assert initial_states(spec, 10, 5) != initial_states(spec, 10, 6)


def test_evaluate_is_deterministic():
    spec = TASKS["lift"]
    a = evaluate(lambda env: RandomPolicy(spec, seed=1), spec, episodes=5, seed=2)
    b = evaluate(lambda env: RandomPolicy(spec, seed=1), spec, episodes=5, seed=2)
    assert a == b


def test_occluded_visual_ignores_grip_configuration():
    spec = TASKS["lift"]
    a, b = contact_env(spec, 0), contact_env(spec, 1)
    assert a.phase == b.phase == "contact"
    b.q_cmd = np.random.default_rng(0).uniform(0.1, 1.0, 16)
    oa, ob = a.observe(), b.observe()
    assert oa.visual.tobytes() == ob.visual.tobytes()
    assert not np.array_equal(oa.tactile, ob.tactile)


def test_visual_tracks_object_before_contact():
    spec = TASKS["lift"]
    layout = make_layout(spec)
    envs = [ContactWorld(spec, InitialState(i, tuple(layout.positions[i]), 0, spec.start_pos), seed=0, layout=layout)
            for i in range(2)]
    assert envs[0].phase == "approach"
    assert not np.allclose(envs[0].observe().visual, envs[1].observe().visual)


def test_wrong_fingers_topple_the_object():
    spec = TASKS["lift"]
    env = contact_env(spec, 0)
    wrong = [f for f in range(4) if f not in env.variant.fingers][0]
    joints = env.q_cmd.copy()
    joints[4 * wrong:4 * wrong + 4] = 1.0
    env.step(np.concatenate([env.ee, [1, 0, 0, 0], joints]))
    assert env.toppled and not env.success()


def test_bad_action_shape():
    env = contact_env(TASKS["lift"], 0)
    with pytest.raises(ValueError):
        env.step(np.zeros(5))


def test_clustered_tactile_labels():
    x, y = clustered_tactile(n_clusters=3, per_cluster=5, seed=0)
    assert x.shape == (15, 15, 4, 4, 3)
    assert np.bincount(y).tolist() == [5, 5, 5]
