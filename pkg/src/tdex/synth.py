"""ContactWorld: a deterministic synthetic stand-in for the robot and its tasks.

An object sits at one of a few coarse table positions and comes in hidden
variants that must be grasped with different fingers. The camera sees the
arm and, until the hand covers it, the object position; it never sees the
variant or the finger configuration. Tactile pads read zero until contact,
then show point contacts on the pads touching the object. Solving a task
therefore needs vision to reach the object and touch to grasp it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .core import (ACTION_DIM, N_JOINTS, PAD_COLS, PAD_FINGER, PAD_ROWS, PAD_SLOT,
                   TACTILE_SHAPE, Trajectory, identity_quat, unit_quat)

APPROACH, CONTACT, MANIPULATE = "approach", "contact", "manipulate"
OPEN_ANGLE = 0.1
GRIP_ANGLE = 1.0
SURFACE_FRACTION = 0.55  # fraction of the grip angle where fingers meet the object
FINGER_BASE = np.array([[-0.03, 0.05, 0.0], [-0.01, 0.055, 0.0], [0.01, 0.05, 0.0], [0.035, 0.0, 0.0]])
CURL = np.array([0.0, -0.035, -0.03])


@dataclass(frozen=True)
class ContactWorldSpec:
    task: str = "lift"
    n_positions: int = 3
    n_variants: int = 2
    layout_seed: int = 0
    workspace: float = 0.12  # object positions lie within +-workspace (m)
    pos_jitter: float = 0.006
    start_pos: tuple = (0.0, -0.16, 0.08)
    start_jitter: float = 0.01
    contact_radius: float = 0.025
    contact_height: float = 0.012
    lift_height: float = 0.05
    expert_ee_step: float = 0.004
    expert_joint_step: float = 0.06
    max_ee_step: float = 0.03
    max_joint_step: float = 1.0
    topple_closure: float = 0.35  # a non-grasping finger closed past this knocks the object over
    grip_tol: float = 0.15
    visual_dim: int = 16
    visual_noise: float = 0.003
    occlusion_noise: float = 0.02
    tactile_noise: float = 0.01
    step_budget: int = 160
    dt: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


TASKS = {
    "lift": ContactWorldSpec(),
    "bottle": ContactWorldSpec(task="bottle", n_positions=2, n_variants=2, layout_seed=1),
    "joystick": ContactWorldSpec(task="joystick", n_positions=2, n_variants=2, layout_seed=2,
                                 lift_height=0.03, step_budget=120),
}


def task_spec(name: str) -> ContactWorldSpec:
    """Resolve ``synth:<task>`` or a bare task name."""
    if name.startswith("synth:"):
        name = name[len("synth:"):]
    if name not in TASKS:
        raise KeyError(f"unknown synthetic task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]


# ---------------------------------------------------------------- world layout

@dataclass(frozen=True)
class Variant:
    fingers: tuple  # fingers that grasp this object
    pad_offset: tuple  # (row, col) shift of the contact point inside each pad

    def grip_joints(self) -> np.ndarray:
        q = np.full(N_JOINTS, OPEN_ANGLE)
        for f in self.fingers:
            q[4 * f:4 * f + 4] = GRIP_ANGLE
        return q


def _finger_sets(n: int, rng: np.random.Generator) -> list:
    base = [(0, 3), (1, 2), (0, 1), (2, 3), (0, 2), (1, 3)]
    if n <= len(base):
        return base[:n]
    extra = [tuple(sorted(rng.choice(4, size=rng.integers(1, 4), replace=False).tolist())) for _ in range(n - len(base))]
    return base + extra


@dataclass
class WorldLayout:
    positions: np.ndarray  # (n_positions, 2)
    variants: list
    arm_proj: np.ndarray  # (visual_dim, 3)
    obj_proj: np.ndarray  # (visual_dim, 2)


def make_layout(spec: ContactWorldSpec, n_variants: Optional[int] = None) -> WorldLayout:
    rng = np.random.default_rng([spec.layout_seed, 101])
    n_variants = spec.n_variants if n_variants is None else n_variants
    angles = np.linspace(0, 2 * np.pi, spec.n_positions, endpoint=False) + rng.uniform(0, 2 * np.pi)
    radius = spec.workspace * 0.8
    positions = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    variants = [Variant(fs, tuple(rng.uniform(-0.8, 0.8, 2).round(3))) for fs in _finger_sets(n_variants, rng)]
    vis_rng = np.random.default_rng([spec.layout_seed, 202])
    arm_proj = vis_rng.standard_normal((spec.visual_dim, 3)) / np.sqrt(spec.visual_dim)
    obj_proj = vis_rng.standard_normal((spec.visual_dim, 2)) / np.sqrt(spec.visual_dim)
    return WorldLayout(positions, variants, arm_proj, obj_proj)


# ---------------------------------------------------------------- sensor models

def fingertips(ee_pos, joints) -> np.ndarray:
    closure = np.asarray(joints).reshape(4, 4).mean(axis=1)
    return np.asarray(ee_pos)[None, :] + FINGER_BASE + closure[:, None] * CURL[None, :]


_YY, _XX = np.mgrid[0:PAD_ROWS, 0:PAD_COLS]


def _point_contact(center, force, width=0.5) -> np.ndarray:
    bump = np.exp(-((_YY - center[0]) ** 2 + (_XX - center[1]) ** 2) / (2 * width * width))
    return bump[..., None] * np.asarray(force)[None, None, :]


def tactile_reading(variant: Variant, offset_xy, q_cmd, phase: str, contact_radius: float,
                    noise: float, rng: np.random.Generator) -> np.ndarray:
    """Pad forces for a hand touching an object of ``variant``.

    Grasping fingers touch on their two distal pads; the contact point moves
    with the hand's offset from the object and force grows with squeeze.
    Non-grasping fingers that close press the object with their tip pad.
    """
    pads = np.zeros(TACTILE_SHAPE)
    if phase == APPROACH:
        return pads
    rel = np.clip(np.asarray(offset_xy) / contact_radius, -1.0, 1.0)
    center = np.array([1.5, 1.5]) + 1.2 * rel[::-1] + np.asarray(variant.pad_offset)
    center = np.clip(center, 0.0, 3.0)
    closure = np.asarray(q_cmd).reshape(4, 4).mean(axis=1) / GRIP_ANGLE
    shear = 0.35 if phase == MANIPULATE else 0.0
    for p in range(len(PAD_FINGER)):
        f, slot = PAD_FINGER[p], PAD_SLOT[p]
        n_slots = 3 if f == 3 else 4
        distal = slot >= n_slots - 2
        if f in variant.fingers and distal:
            mag = 0.3 + 0.7 * np.clip(closure[f], 0.0, 1.0)
            force = (0.25 * rel[0] * mag, (0.2 * rel[1] + shear) * mag, mag)
            pads[p] = _point_contact(center, force)
        elif f not in variant.fingers and slot == n_slots - 1 and closure[f] > 0.35:
            mag = 0.8 * closure[f]
            pads[p] = _point_contact((3.0 - center[0], center[1]), (0.0, 0.0, mag))
    pads += noise * rng.standard_normal(TACTILE_SHAPE)
    return pads


# ---------------------------------------------------------------- environment

@dataclass
class Observation:
    visual: np.ndarray
    tactile: np.ndarray
    ee_pos: np.ndarray
    ee_quat: np.ndarray
    joints: np.ndarray
    fingertips: np.ndarray
    q_des: np.ndarray  # last commanded joints
    qd: np.ndarray  # joint velocity (rad/s)
    phase: str


@dataclass(frozen=True)
class InitialState:
    position_index: int
    object_xy: tuple
    variant_index: int
    start_pos: tuple


def initial_states(spec: ContactWorldSpec, episodes: int, seed: int) -> list:
    """Evaluation start configurations; identical for every method given the seed."""
    out = []
    for i in range(episodes):
        rng = np.random.default_rng([seed, 303, i])
        pos_i = int(rng.integers(spec.n_positions))
        var_i = int(rng.integers(spec.n_variants))
        layout = make_layout(spec)
        xy = layout.positions[pos_i] + rng.uniform(-spec.pos_jitter, spec.pos_jitter, 2)
        start = np.asarray(spec.start_pos) + rng.uniform(-spec.start_jitter, spec.start_jitter, 3)
        out.append(InitialState(pos_i, tuple(xy.tolist()), var_i, tuple(start.tolist())))
    return out


class ContactWorld:
    """One episode of a ContactWorld task."""

    def __init__(self, spec: ContactWorldSpec, init: InitialState, seed: int = 0,
                 layout: Optional[WorldLayout] = None, variant: Optional[Variant] = None):
        self.spec = spec
        self.layout = layout if layout is not None else make_layout(spec)
        self.variant = variant if variant is not None else self.layout.variants[init.variant_index]
        self.init = init
        self.rng = np.random.default_rng([seed, 404])
        self.object = np.array([init.object_xy[0], init.object_xy[1], 0.0])
        self.ee = np.array(init.start_pos, dtype=np.float64)
        self.quat = identity_quat()
        self.q_cmd = np.full(N_JOINTS, OPEN_ANGLE)
        self.q = self.q_cmd.copy()
        self.qd = np.zeros(N_JOINTS)
        self.grasped = False
        self.toppled = False
        self.t = 0
        self._update_contact()

    # -- state predicates
    def offset(self) -> np.ndarray:
        return self.ee[:2] - self.object[:2]

    def in_region(self) -> bool:
        if self.grasped:
            return True
        return (np.linalg.norm(self.offset()) <= self.spec.contact_radius
                and self.ee[2] <= self.object[2] + self.spec.contact_height)

    @property
    def phase(self) -> str:
        if self.grasped:
            return MANIPULATE
        return CONTACT if self.in_region() else APPROACH

    def success(self) -> bool:
        return self.grasped and not self.toppled and self.object[2] >= self.spec.lift_height

    def wrong_closure(self) -> bool:
        closure = self.q_cmd.reshape(4, 4).mean(axis=1)
        others = [f for f in range(4) if f not in self.variant.fingers]
        return bool(np.any(closure[others] > self.spec.topple_closure))

    def grip_error(self) -> float:
        return float(np.max(np.abs(self.q_cmd - self.variant.grip_joints())))

    # -- dynamics
    def _update_contact(self):
        surface = SURFACE_FRACTION * GRIP_ANGLE
        q = self.q_cmd.copy()
        if self.in_region():
            for f in self.variant.fingers:
                q[4 * f:4 * f + 4] = np.minimum(q[4 * f:4 * f + 4], surface)
        self.qd = (q - self.q) / self.spec.dt
        self.q = q

    def step(self, action) -> Observation:
        """Fingers act first, then the arm; a grasp needs the hand in the contact region."""
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise ValueError(f"action must have {ACTION_DIM} entries")
        dq = np.clip(a[7:] - self.q_cmd, -self.spec.max_joint_step, self.spec.max_joint_step)
        self.q_cmd = self.q_cmd + dq
        if self.grasped and self.grip_error() > 2 * self.spec.grip_tol:
            self.grasped = False
            self.object[2] = 0.0
        if not self.grasped and self.in_region() and self.wrong_closure():
            self.toppled = True
        if not (self.grasped or self.toppled) and self.in_region() and self.grip_error() <= self.spec.grip_tol:
            self.grasped = True
            self._grasp_offset = self.ee[:2] - self.object[:2]
        delta = a[:3] - self.ee
        dist = np.linalg.norm(delta)
        if dist > self.spec.max_ee_step:
            delta *= self.spec.max_ee_step / dist
        self.ee = self.ee + delta
        self.ee[2] = max(self.ee[2], 0.0)
        self.quat = unit_quat(a[3:7])
        if self.grasped:
            self.object = np.array([self.ee[0] - self._grasp_offset[0], self.ee[1] - self._grasp_offset[1],
                                    self.ee[2]])
        self._update_contact()
        self.t += 1
        return self.observe()

    def observe(self) -> Observation:
        phase = self.phase
        arm = self.layout.arm_proj @ self.ee
        if phase == APPROACH:
            obj = self.layout.obj_proj @ self.object[:2]
        else:
            obj = self.spec.occlusion_noise * self.rng.standard_normal(self.spec.visual_dim)
        visual = arm + obj + self.spec.visual_noise * self.rng.standard_normal(self.spec.visual_dim)
        tactile = tactile_reading(self.variant, self.offset(), self.q_cmd, phase,
                                  self.spec.contact_radius, self.spec.tactile_noise, self.rng)
        return Observation(visual, tactile, self.ee.copy(), self.quat.copy(), self.q.copy(),
                           fingertips(self.ee, self.q), self.q_cmd.copy(), self.qd.copy(), phase)


# ---------------------------------------------------------------- scripted behaviour

class ExpertPolicy:
    """Privileged scripted controller: reach, close the right fingers, lift."""

    def __init__(self, env: ContactWorld):
        self.env = env

    def reset(self):
        pass

    def act(self, obs: Observation) -> np.ndarray:
        env, spec = self.env, self.env.spec
        grip = env.variant.grip_joints()
        if env.grasped:
            target = env.ee + np.array([0.0, 0.0, spec.expert_ee_step])
            joints = grip
        elif env.in_region():
            target = env.ee.copy()
            joints = env.q_cmd + np.clip(grip - env.q_cmd, -spec.expert_joint_step, spec.expert_joint_step)
        else:
            goal = np.array([env.object[0], env.object[1], 0.0])
            delta = goal - env.ee
            # stay high until roughly above the object
            if np.linalg.norm(delta[:2]) > 0.5 * spec.contact_radius:
                delta[2] = max(0.02 - env.ee[2], -spec.expert_ee_step) if env.ee[2] > 0.02 else 0.0
            dist = np.linalg.norm(delta)
            step = spec.expert_ee_step
            target = env.ee + (delta if dist <= step else delta * step / dist)
            joints = env.q_cmd.copy()
        return np.concatenate([target, identity_quat(), joints])


class RandomPolicy:
    def __init__(self, spec: ContactWorldSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng([seed, 505])

    def reset(self):
        pass

    def act(self, obs: Observation) -> np.ndarray:
        w = self.spec.workspace
        target = obs.ee_pos + self.rng.uniform(-0.03, 0.03, 3)
        target[:2] = np.clip(target[:2], -w, w)
        joints = self.rng.uniform(OPEN_ANGLE, GRIP_ANGLE, N_JOINTS)
        return np.concatenate([target, identity_quat(), joints])


def _record(obs_list, actions, dt, meta) -> Trajectory:
    n = len(obs_list)
    traj = Trajectory(
        t=np.arange(n) * dt,
        tactile=np.stack([o.tactile for o in obs_list]),
        ee_pos=np.stack([o.ee_pos for o in obs_list]),
        ee_quat=np.stack([o.ee_quat for o in obs_list]),
        joints=np.stack([o.joints for o in obs_list]),
        fingertips=np.stack([o.fingertips for o in obs_list]),
        visual=np.stack([o.visual for o in obs_list]),
        actions=None if actions is None else np.stack(actions),
        meta=meta,
    )
    traj.meta["q_des"] = np.stack([o.q_des for o in obs_list])
    traj.meta["qd"] = np.stack([o.qd for o in obs_list])
    traj.meta["phase"] = [o.phase for o in obs_list]
    return traj


def run_episode(env: ContactWorld, policy, max_steps: int) -> tuple:
    """Roll ``policy`` until success or ``max_steps``; returns (observations, actions, success)."""
    obs = env.observe()
    observations, actions = [], []
    for _ in range(max_steps):
        if env.success():
            break
        a = policy.act(obs)
        observations.append(obs)
        actions.append(np.asarray(a, dtype=np.float64))
        obs = env.step(a)
    return observations, actions, env.success()


def generate_demos(spec: ContactWorldSpec, n: int = 6, seed: int = 0) -> list:
    """Scripted expert demonstrations cycling through (position, variant) pairs."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    layout = make_layout(spec)
    demos = []
    for i in range(n):
        rng = np.random.default_rng([seed, 606, i])
        pos_i = i % spec.n_positions
        var_i = (i // spec.n_positions) % spec.n_variants
        xy = layout.positions[pos_i] + rng.uniform(-spec.pos_jitter, spec.pos_jitter, 2)
        start = np.asarray(spec.start_pos) + rng.uniform(-spec.start_jitter, spec.start_jitter, 3)
        init = InitialState(pos_i, tuple(xy.tolist()), var_i, tuple(start.tolist()))
        env = ContactWorld(spec, init, seed=int(rng.integers(2**31)), layout=layout)
        obs, acts, ok = run_episode(env, ExpertPolicy(env), 10 * spec.step_budget)
        if not ok:
            raise RuntimeError(f"scripted expert failed on demo {i}")
        demos.append(_record(obs, acts, spec.dt, {"kind": "demo", "position": pos_i, "variant": var_i,
                                                  "object_xy": list(xy)}))
    return demos


def generate_play(spec: ContactWorldSpec, minutes_equivalent: float = 10.0, seed: int = 0,
                  n_objects: int = 8) -> list:
    """Task-agnostic exploration over many object variants and positions.

    Each segment reaches a random object, closes a random finger subset
    (sometimes the correct one), may lift, then releases. The hand often
    fails, which is part of the point.
    """
    layout = make_layout(spec, n_variants=n_objects)
    total_steps = int(round(minutes_equivalent * 60.0 / spec.dt))
    trajs = []
    seg = 0
    steps = 0
    while steps < total_steps:
        rng = np.random.default_rng([seed, 707, seg])
        xy = rng.uniform(-spec.workspace, spec.workspace, 2)
        variant = layout.variants[int(rng.integers(len(layout.variants)))]
        start = np.array([rng.uniform(-spec.workspace, spec.workspace), rng.uniform(-spec.workspace, spec.workspace),
                          rng.uniform(0.03, 0.09)])
        init = InitialState(-1, tuple(xy.tolist()), 0, tuple(start.tolist()))
        env = ContactWorld(spec, init, seed=int(rng.integers(2**31)), layout=layout, variant=variant)
        explorer = _PlayExplorer(env, rng)
        budget = min(total_steps - steps, int(rng.integers(120, 260)))
        obs = env.observe()
        observations, actions = [], []
        for _ in range(budget):
            a = explorer.act(obs)
            observations.append(obs)
            actions.append(a)
            obs = env.step(a)
        trajs.append(_record(observations, actions, spec.dt, {"kind": "play", "segment": seg}))
        steps += budget
        seg += 1
    return trajs


class _PlayExplorer:
    def __init__(self, env: ContactWorld, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.mode = "reach"
        self.grip = self._random_grip()
        self.hold = 0
        self.aim = rng.uniform(-0.6, 0.6, 2) * env.spec.contact_radius

    def _random_grip(self) -> np.ndarray:
        if self.rng.random() < 0.5:
            return self.env.variant.grip_joints()
        q = np.full(N_JOINTS, OPEN_ANGLE)
        for f in range(4):
            if self.rng.random() < 0.5:
                q[4 * f:4 * f + 4] = self.rng.uniform(0.4, GRIP_ANGLE)
        return q

    def act(self, obs: Observation) -> np.ndarray:
        env, spec, rng = self.env, self.env.spec, self.rng
        step = spec.expert_ee_step * rng.uniform(0.5, 1.5)
        joints = env.q_cmd.copy()
        if self.mode == "reach":
            goal = np.array([env.object[0] + self.aim[0], env.object[1] + self.aim[1], 0.0])
            delta = goal - env.ee
            if np.linalg.norm(delta[:2]) > 0.5 * spec.contact_radius and env.ee[2] > 0.02:
                delta[2] = 0.0
            dist = np.linalg.norm(delta)
            target = env.ee + (delta if dist <= step else delta * step / dist)
            target[:2] += rng.normal(0, 0.001, 2)
            if env.in_region():
                self.mode = "squeeze"
        elif self.mode == "squeeze":
            target = env.ee + np.append(rng.normal(0, 0.0015, 2), 0.0)
            joints = env.q_cmd + np.clip(self.grip - env.q_cmd, -spec.expert_joint_step, spec.expert_joint_step)
            if np.max(np.abs(joints - self.grip)) < 1e-9:
                self.mode = "press"
                self.hold = int(rng.integers(3, 10))
        elif self.mode == "press":
            target = env.ee + np.append(rng.normal(0, 0.001, 2), 0.0)
            self.hold -= 1
            if self.hold <= 0:
                self.mode = "lift" if rng.random() < 0.6 else "release"
                self.hold = int(rng.integers(8, 20))
        elif self.mode == "lift":
            target = env.ee + np.array([0.0, 0.0, step])
            self.hold -= 1
            if self.hold <= 0:
                self.mode = "release"
        else:  # release, then wander to a new contact spot
            joints = env.q_cmd + np.clip(OPEN_ANGLE - env.q_cmd, -spec.expert_joint_step, spec.expert_joint_step)
            target = env.ee + np.array([0.0, 0.0, step])
            if np.max(np.abs(joints - OPEN_ANGLE)) < 1e-9:
                self.mode = "reach"
                self.grip = self._random_grip()
                self.aim = rng.uniform(-0.6, 0.6, 2) * spec.contact_radius
        return np.concatenate([target, identity_quat(), joints])


def contact_fraction(trajs) -> float:
    total = sum(len(t) for t in trajs)
    touching = sum(sum(p != APPROACH for p in t.meta.get("phase", [])) for t in trajs)
    return touching / total if total else 0.0


# ---------------------------------------------------------------- evaluation

def evaluate(make_policy, spec: ContactWorldSpec, episodes: int, seed: int) -> dict:
    """Run ``episodes`` fixed-seed episodes; ``make_policy(env)`` builds a fresh policy each time."""
    records = []
    for i, init in enumerate(initial_states(spec, episodes, seed)):
        env = ContactWorld(spec, init, seed=int(np.random.default_rng([seed, 808, i]).integers(2**31)))
        policy = make_policy(env)
        policy.reset()
        obs, acts, ok = run_episode(env, policy, spec.step_budget)
        records.append({"episode": i, "success": bool(ok), "steps": len(acts),
                        "position": init.position_index, "variant": init.variant_index,
                        "trace": getattr(policy, "trace", None)})
    rate = float(np.mean([r["success"] for r in records])) if records else 0.0
    return {"success_rate": rate, "episodes": records}


# ---------------------------------------------------------------- representation probe data

def clustered_tactile(n_clusters: int = 16, per_cluster: int = 64, seed: int = 0,
                      pads_per_cluster: int = 2, noise: float = 0.02) -> tuple:
    """Labelled tactile frames whose class is the touched pads and force direction.

    Inside a class the point contact lands on a random taxel of each pad with
    random sharpness and strength, so raw-space neighbours are unreliable.
    """
    rng = np.random.default_rng([seed, 909])
    protos = [(rng.choice(len(PAD_FINGER), size=pads_per_cluster, replace=False), rng.uniform(0.2, 1.0, 3))
              for _ in range(n_clusters)]
    frames, labels = [], []
    for c, (active, direction) in enumerate(protos):
        for _ in range(per_cluster):
            pads = np.zeros(TACTILE_SHAPE)
            width = rng.uniform(0.3, 0.6)
            amp = rng.uniform(0.7, 1.3)
            for p in active:
                pads[p] = _point_contact(rng.uniform(0, 3, 2), amp * direction, width)
            frames.append(pads + noise * rng.standard_normal(TACTILE_SHAPE))
            labels.append(c)
    return np.array(frames), np.array(labels)


def with_spec(spec: ContactWorldSpec, **changes) -> ContactWorldSpec:
    return replace(spec, **changes)
