"""Deterministic 2D tabletop manipulation suites with scripted experts.

The world is a unit square. An effector moves by bounded displacements,
grasps the nearest free object when its gripper closes within reach, carries
it, and drops it in place on release. A closed gripper shoves free objects
aside on contact; an open gripper passes over them. Episodes end on goal
satisfaction or at the horizon.

Four suite flavors vary what distinguishes tasks: object identity, goal
region, start position of otherwise identical objects, or two chained
transport sub-goals. All dynamics are pure functions of (state, action,
task), so replaying recorded actions reproduces an episode bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, DataError

WORKSPACE_LO = 0.0
WORKSPACE_HI = 1.0
MAX_STEP = 0.05  # per-axis displacement cap
GRASP_RADIUS = 0.03
PUSH_RADIUS = 0.03
REGION_RADIUS = 0.07
EXPERT_NOISE = 0.005

N_OBJECT_CLASSES = 8
CLASS_NAMES = ("red", "blue", "green", "yellow", "purple", "orange", "teal", "gray")

SUITE_KINDS = ("Object", "Goal", "Spatial", "Long")
SHORT_HORIZON = 80
LONG_HORIZON = 160

# observation feature widths (2 object slots everywhere)
N_OBJECT_SLOTS = 2
VIEW_DIM = N_OBJECT_SLOTS * (2 + N_OBJECT_CLASSES) + 4  # xy+one-hot per slot, 2 region centers
PROPRIO_DIM = 3


@dataclass(frozen=True)
class ObjectState:
    id: int
    xy: tuple[float, float]
    held: bool = False


@dataclass(frozen=True)
class EnvState:
    effector_xy: tuple[float, float]
    gripper_closed: bool
    objects: tuple[ObjectState, ...]
    step_count: int = 0


@dataclass(frozen=True)
class Action:
    delta_xy: tuple[float, float]
    gripper_cmd: float  # >0 close, <=0 open


@dataclass(frozen=True)
class TargetSpec:
    slot: int
    center: tuple[float, float]
    radius: float = REGION_RADIUS


@dataclass(frozen=True)
class GoalSpec:
    """Ordered transport sub-goals; satisfied when every target object rests
    free inside its region."""

    targets: tuple[TargetSpec, ...]


@dataclass(frozen=True)
class InitDist:
    effector_box: tuple[tuple[float, float], tuple[float, float]]
    object_boxes: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    object_classes: tuple[int, ...]
    min_separation: float = 0.12


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    suite_kind: str
    language: str
    init_dist: InitDist
    goal: GoalSpec
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"task {self.task_id}: horizon must be >= 1, got {self.horizon}")
        if self.suite_kind not in SUITE_KINDS:
            raise ConfigError(f"task {self.task_id}: unknown suite kind {self.suite_kind!r}")
        for tgt in self.goal.targets:
            for c in tgt.center:
                if not (tgt.radius <= c <= 1.0 - tgt.radius):
                    raise ConfigError(f"task {self.task_id}: goal region at {tgt.center} leaves the workspace")
        if self.suite_kind == "Long" and len(self.goal.targets) != 2:
            raise ConfigError(f"task {self.task_id}: Long tasks need exactly two ordered sub-goals")


@dataclass(frozen=True)
class Observation:
    workspace_view: np.ndarray  # global features, fixed layout
    wrist_view: np.ndarray  # the same features relative to the effector
    proprio: np.ndarray  # effector xy + gripper flag
    language_id: int


@dataclass
class Demonstration:
    task_id: int
    init_state: EnvState
    steps: list[tuple[Observation, Action]]
    success: bool


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _clip_pos(x: float, y: float) -> tuple[float, float]:
    return (min(max(x, WORKSPACE_LO), WORKSPACE_HI), min(max(y, WORKSPACE_LO), WORKSPACE_HI))


def goal_satisfied(state: EnvState, task: TaskSpec) -> bool:
    for tgt in task.goal.targets:
        obj = state.objects[tgt.slot]
        if obj.held or _dist(obj.xy, tgt.center) > tgt.radius:
            return False
    return True


def step(state: EnvState, action: Action, task: TaskSpec) -> tuple[EnvState, bool, bool]:
    """Advance one timestep. Returns (next_state, done, success).

    Transition order: gripper state updates first (opening drops any held
    object in place), then the effector moves by the clipped delta carrying a
    held object, then an empty closed gripper grasps the nearest free object
    in reach, then the closed gripper shoves remaining free objects in
    contact out to arm's length.

    Grasping keys off the closed state, not the closing edge: an early close
    a hair outside reach still picks the object up on the next step instead
    of locking the episode into an unrecoverable closed-and-empty crawl.
    """
    if state.step_count >= task.horizon:
        raise ContractError(f"task {task.task_id}: episode already done at step {state.step_count}")
    dx, dy = action.delta_xy
    if not (math.isfinite(dx) and math.isfinite(dy) and math.isfinite(action.gripper_cmd)):
        raise ContractError("action components must be finite")
    dx = min(max(dx, -MAX_STEP), MAX_STEP)
    dy = min(max(dy, -MAX_STEP), MAX_STEP)

    closing = action.gripper_cmd > 0.0
    objects = list(state.objects)

    if not closing and state.gripper_closed:
        objects = [replace(o, held=False) if o.held else o for o in objects]

    eff = _clip_pos(state.effector_xy[0] + dx, state.effector_xy[1] + dy)
    objects = [replace(o, xy=eff) if o.held else o for o in objects]

    if closing and not any(o.held for o in objects):
        best, best_d = None, GRASP_RADIUS
        for i, o in enumerate(objects):
            d = _dist(o.xy, eff)
            if d <= best_d and (best is None or d < best_d):
                best, best_d = i, d  # ties go to the lower slot
        if best is not None:
            objects[best] = replace(objects[best], held=True)

    if closing:
        for i, o in enumerate(objects):
            if o.held:
                continue
            d = _dist(o.xy, eff)
            if d <= PUSH_RADIUS:
                if d < 1e-9:
                    ux, uy = 1.0, 0.0
                else:
                    ux, uy = (o.xy[0] - eff[0]) / d, (o.xy[1] - eff[1]) / d
                objects[i] = replace(o, xy=_clip_pos(eff[0] + ux * PUSH_RADIUS, eff[1] + uy * PUSH_RADIUS))

    new_state = EnvState(
        effector_xy=eff,
        gripper_closed=closing,
        objects=tuple(objects),
        step_count=state.step_count + 1,
    )
    success = goal_satisfied(new_state, task)
    done = success or new_state.step_count >= task.horizon
    return new_state, done, success


def observe(state: EnvState, task: TaskSpec) -> Observation:
    ex, ey = state.effector_xy
    centers = [t.center for t in task.goal.targets[:2]]
    while len(centers) < 2:
        centers.append((0.0, 0.0))

    ws = np.zeros(VIEW_DIM)
    wr = np.zeros(VIEW_DIM)
    off = 0
    for slot in range(N_OBJECT_SLOTS):
        o = state.objects[slot]
        ws[off], ws[off + 1] = o.xy
        wr[off], wr[off + 1] = o.xy[0] - ex, o.xy[1] - ey
        cls = task.init_dist.object_classes[slot]
        ws[off + 2 + cls] = 1.0
        wr[off + 2 + cls] = 1.0
        off += 2 + N_OBJECT_CLASSES
    for cx, cy in centers:
        ws[off], ws[off + 1] = cx, cy
        wr[off], wr[off + 1] = cx - ex, cy - ey
        off += 2

    proprio = np.array([ex, ey, 1.0 if state.gripper_closed else 0.0])
    return Observation(workspace_view=ws, wrist_view=wr, proprio=proprio, language_id=task.task_id)


# ---------------------------------------------------------------------------
# initial-state sampling

_RESET_TRIES = 1000


def reset(task: TaskSpec, rng: np.random.Generator) -> EnvState:
    """Sample an initial state: effector in its box, objects in theirs with
    pairwise separation and clearance from every goal region."""
    d = task.init_dist
    (lo, hi) = d.effector_box
    eff = (float(rng.uniform(lo[0], hi[0])), float(rng.uniform(lo[1], hi[1])))

    centers = [t.center for t in task.goal.targets]
    positions: list[tuple[float, float]] = []
    for box in d.object_boxes:
        (blo, bhi) = box
        for _ in range(_RESET_TRIES):
            p = (float(rng.uniform(blo[0], bhi[0])), float(rng.uniform(blo[1], bhi[1])))
            if all(_dist(p, q) >= d.min_separation for q in positions) and all(
                _dist(p, c) >= REGION_RADIUS + 0.03 for c in centers
            ):
                positions.append(p)
                break
        else:
            raise ContractError(f"task {task.task_id}: could not place objects after {_RESET_TRIES} tries")

    objects = tuple(ObjectState(id=i, xy=p) for i, p in enumerate(positions))
    return EnvState(effector_xy=eff, gripper_closed=False, objects=objects, step_count=0)


# ---------------------------------------------------------------------------
# scripted expert

_GRASP_APPROACH = 0.04  # begin closing inside this distance; contact completes the grasp
_RELEASE_DIST = 0.015  # drop once this close to the region center
_SLOW_RADIUS = 0.08  # decelerate inside this distance of a waypoint
_SLOW_GAIN = 0.6  # fraction of the remaining distance covered per slow step


def expert_action(task: TaskSpec, state: EnvState, rng: np.random.Generator) -> Action:
    """Waypoint proportional controller: approach, grasp, carry, release, one
    sub-goal at a time in goal order. Decelerates near waypoints so the
    slow-approach regime is well represented in demonstrations, and closes a
    little early, leaning on the grasp-on-contact dynamics. Uniform +/-0.005
    noise on the delta."""
    noise = rng.uniform(-EXPERT_NOISE, EXPERT_NOISE, size=2)

    def toward(p: tuple[float, float]) -> tuple[float, float]:
        rx = p[0] - state.effector_xy[0]
        ry = p[1] - state.effector_xy[1]
        if math.hypot(rx, ry) <= _SLOW_RADIUS:
            rx, ry = rx * _SLOW_GAIN, ry * _SLOW_GAIN
        dx = min(max(rx, -MAX_STEP), MAX_STEP)
        dy = min(max(ry, -MAX_STEP), MAX_STEP)
        return (dx + float(noise[0]), dy + float(noise[1]))

    for tgt in task.goal.targets:
        obj = state.objects[tgt.slot]
        if not obj.held and _dist(obj.xy, tgt.center) <= tgt.radius:
            continue  # this sub-goal already rests satisfied
        if obj.held:
            if _dist(state.effector_xy, tgt.center) <= _RELEASE_DIST:
                return Action(delta_xy=(float(noise[0]), float(noise[1])), gripper_cmd=-1.0)
            return Action(delta_xy=toward(tgt.center), gripper_cmd=1.0)
        close = _dist(state.effector_xy, obj.xy) <= _GRASP_APPROACH
        return Action(delta_xy=toward(obj.xy), gripper_cmd=1.0 if close else -1.0)

    return Action(delta_xy=(float(noise[0]), float(noise[1])), gripper_cmd=-1.0)


def rollout_expert(task: TaskSpec, rng: np.random.Generator) -> Demonstration:
    state = reset(task, rng)
    demo = Demonstration(task_id=task.task_id, init_state=state, steps=[], success=False)
    done = False
    while not done:
        obs = observe(state, task)
        action = expert_action(task, state, rng)
        state, done, success = step(state, action, task)
        demo.steps.append((obs, action))
        demo.success = success
    return demo


def collect_demos(task: TaskSpec, n: int, seed: int) -> list[Demonstration]:
    """Gather n successful expert episodes, retrying failures on fresh
    attempt-indexed substreams. Deterministic given (task, n, seed)."""
    demos: list[Demonstration] = []
    attempt = 0
    max_attempts = max(50 * n, 50)
    while len(demos) < n:
        if attempt >= max_attempts:
            raise DataError(
                f"task {task.task_id}: expert succeeded {len(demos)}/{n} times in {max_attempts} attempts"
            )
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), task.task_id, attempt]))
        demo = rollout_expert(task, rng)
        if demo.success:
            demos.append(demo)
        attempt += 1
    return demos


def replay_demo(task: TaskSpec, demo: Demonstration) -> tuple[list[Observation], bool]:
    """Re-simulate a demonstration from its initial state; pure dynamics make
    the result identical to the recording."""
    state = demo.init_state
    observations = []
    success = goal_satisfied(state, task)
    for _, action in demo.steps:
        observations.append(observe(state, task))
        state, _, success = step(state, action, task)
    return observations, success


# ---------------------------------------------------------------------------
# suite construction


def _box(cx: float, cy: float, half: float):
    return ((cx - half, cy - half), (cx + half, cy + half))


def _object_task(k: int, rng: np.random.Generator) -> TaskSpec:
    target_cls = k % (N_OBJECT_CLASSES - 1)
    distractor_cls = N_OBJECT_CLASSES - 1
    init = InitDist(
        effector_box=((0.15, 0.2), (0.85, 0.62)),
        object_boxes=(_box(0.62, 0.78, 0.04), _box(0.3, 0.74, 0.04)),
        object_classes=(target_cls, distractor_cls),
    )
    goal = GoalSpec(targets=(TargetSpec(slot=0, center=(0.5, 0.15)),))
    lang = f"move the {CLASS_NAMES[target_cls]} block to the drop zone"
    return TaskSpec(k, "Object", lang, init, goal, SHORT_HORIZON)


def _goal_task(k: int, rng: np.random.Generator, n_tasks: int) -> TaskSpec:
    # goal centers on a jittered lattice along the lower strip, well separated
    frac = k / max(n_tasks - 1, 1)
    cx = 0.14 + 0.72 * frac + float(rng.uniform(-0.015, 0.015))
    cy = 0.16 + float(rng.uniform(-0.03, 0.03))
    init = InitDist(
        effector_box=((0.15, 0.2), (0.85, 0.62)),
        object_boxes=(_box(0.62, 0.78, 0.04), _box(0.3, 0.74, 0.04)),
        object_classes=(0, N_OBJECT_CLASSES - 1),
    )
    goal = GoalSpec(targets=(TargetSpec(slot=0, center=(cx, cy)),))
    lang = f"move the {CLASS_NAMES[0]} block to zone {k + 1}"
    return TaskSpec(k, "Goal", lang, init, goal, SHORT_HORIZON)


def _spatial_task(k: int, rng: np.random.Generator, n_tasks: int) -> TaskSpec:
    # two identical objects; only the start region of the wanted one varies
    theta = 2.0 * math.pi * k / max(n_tasks, 1) + float(rng.uniform(-0.1, 0.1))
    cx = 0.5 + 0.3 * math.cos(theta)
    cy = 0.55 + 0.28 * math.sin(theta)
    ox = 0.5 - 0.3 * math.cos(theta)
    oy = 0.55 - 0.28 * math.sin(theta)
    init = InitDist(
        effector_box=((0.3, 0.35), (0.7, 0.65)),
        object_boxes=(_box(cx, cy, 0.05), _box(ox, oy, 0.05)),
        object_classes=(6, 6),
    )
    goal = GoalSpec(targets=(TargetSpec(slot=0, center=(0.5, 0.12)),))
    lang = f"move the {CLASS_NAMES[6]} block starting in region {k + 1} to the drop zone"
    return TaskSpec(k, "Spatial", lang, init, goal, SHORT_HORIZON)


def _long_task(k: int, rng: np.random.Generator) -> TaskSpec:
    c0 = k % (N_OBJECT_CLASSES - 1)
    c1 = (k + 1) % (N_OBJECT_CLASSES - 1)
    jx = float(rng.uniform(-0.02, 0.02))
    jy = float(rng.uniform(-0.02, 0.02))
    mirrored = k % 2 == 1
    left, right = (0.82, 0.18) if mirrored else (0.18, 0.82)
    init = InitDist(
        effector_box=((0.25, 0.3), (0.75, 0.7)),
        object_boxes=(_box(left, 0.85, 0.05), _box(right, 0.85, 0.05)),
        object_classes=(c0, c1),
    )
    goal = GoalSpec(
        targets=(
            TargetSpec(slot=0, center=(left + jx, 0.15 + jy)),
            TargetSpec(slot=1, center=(right + jx, 0.15 + jy)),
        )
    )
    lang = (
        f"move the {CLASS_NAMES[c0]} block to its zone, then move the "
        f"{CLASS_NAMES[c1]} block to the opposite zone"
    )
    return TaskSpec(k, "Long", lang, init, goal, LONG_HORIZON)


def make_suite(kind: str, n_tasks: int, seed: int) -> list[TaskSpec]:
    """Build a deterministic list of task specifications for one suite."""
    if kind not in SUITE_KINDS:
        raise ConfigError(f"unknown suite kind {kind!r}; expected one of {SUITE_KINDS}")
    if n_tasks < 1:
        raise ConfigError(f"n_tasks must be >= 1, got {n_tasks}")
    code = SUITE_KINDS.index(kind)
    rng = np.random.default_rng(np.random.SeedSequence([code, int(seed)]))
    tasks = []
    for k in range(n_tasks):
        if kind == "Object":
            tasks.append(_object_task(k, rng))
        elif kind == "Goal":
            tasks.append(_goal_task(k, rng, n_tasks))
        elif kind == "Spatial":
            tasks.append(_spatial_task(k, rng, n_tasks))
        else:
            tasks.append(_long_task(k, rng))
    return tasks
