"""Lifelong training harness: the four training paradigms over a task
sequence, behavior cloning on demonstrations, scheduled evaluation rollouts,
and the early-stopping rule.

Paradigms:
  sequential  plain fine-tuning task by task (the codebook still grows and
              freezes old rows; everything else drifts freely)
  er          sequential plus a fixed-capacity replay buffer; each gradient
              step mixes in a replay batch of equal size
  packnet     magnitude pruning assigns a fraction of the free backbone
              weights to each task and freezes them; evaluation of task j
              masks out everything assigned later
  multitask   joint training on the union of all demos (upper-bound row)

Seed discipline: every random stream is derived from the run seed plus fixed
integer tags, so a rerun reproduces curves bit-exactly and paradigms that
coincide structurally (sequential vs. er with capacity 0) consume identical
streams.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tape
from .envs import MAX_STEP, Action, Demonstration, TaskSpec, collect_demos, observe, reset, step
from .errors import ConfigError, ContractError
from .metrics import SuccessRecord
from .optim import AdamW, clip_grad_norm
from .perception import stack_windows
from .policy import ModelConfig, SkillPolicy, bc_loss, sample_action

PARADIGMS = ("sequential", "er", "packnet", "multitask")

# seed-stream tags
_TAG_MODEL = 0
_TAG_REGISTER = 1
_TAG_EPOCH = 2
_TAG_REPLAY = 3
_TAG_EVICT = 4
_TAG_EVAL = 5


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def registration_rng(seed: int, task_id: int) -> np.random.Generator:
    """Stream used to initialize task task_id's codebook rows and adapter
    factors; re-registering with the same stream reproduces them exactly."""
    return _rng(seed, _TAG_REGISTER, task_id)


def eviction_rng(seed: int, task_id: int) -> np.random.Generator:
    """Stream used for replay-buffer eviction after task task_id."""
    return _rng(seed, _TAG_EVICT, task_id)


@dataclass
class ParadigmConfig:
    kind: str = "sequential"
    er_capacity: int = 100
    packnet_keep_ratio: float = 0.5
    packnet_finetune_epochs: int = 5
    # per-task adapter factor pairs (frozen after their task) instead of one
    # shared pair; packnet always uses per-task factors
    per_task_adapter_factors: bool | None = None

    def __post_init__(self):
        if self.kind not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.kind!r}")
        if self.er_capacity < 0:
            raise ConfigError("er_capacity must be >= 0")
        if not 0.0 < self.packnet_keep_ratio < 1.0:
            raise ConfigError("packnet_keep_ratio must lie in (0, 1)")
        if self.packnet_finetune_epochs < 0:
            raise ConfigError("packnet_finetune_epochs must be >= 0")
        if self.per_task_adapter_factors is None:
            self.per_task_adapter_factors = self.kind == "packnet"
        elif self.kind == "packnet" and not self.per_task_adapter_factors:
            raise ConfigError("packnet requires per-task adapter factors")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    eval_every: int = 5
    n_demos: int = 10
    eval_episodes: int = 20
    early_stop_threshold: float = 0.95
    # fraction of training windows presented in the online form (future slots
    # repeat the center observation). Demo futures reveal the action through
    # consecutive proprio deltas, so a policy trained purely on them copies
    # the future instead of reading the present and fails in closed loop.
    online_window_prob: float = 0.5
    grad_clip: float = 1.0  # global L2 norm cap, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("epochs and eval_every must be >= 1")
        if self.epochs % self.eval_every != 0:
            raise ConfigError(f"epochs ({self.epochs}) must be a multiple of eval_every ({self.eval_every})")
        if self.batch_size < 1 or self.n_demos < 1:
            raise ConfigError("batch_size and n_demos must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.online_window_prob <= 1.0:
            raise ConfigError("online_window_prob must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")

    @property
    def eval_points(self) -> list[int]:
        return list(range(0, self.epochs + 1, self.eval_every))


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigError("capacity must be >= 0")
        self.capacity = capacity
        self.stored: list[tuple[int, Demonstration]] = []

    def __len__(self) -> int:
        return len(self.stored)

    def task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for task_id, _ in self.stored:
            counts[task_id] = counts.get(task_id, 0) + 1
        return counts

    def add(self, task_id: int, demo: Demonstration, rng: np.random.Generator) -> None:
        """Insert one trajectory; on overflow evict uniformly at random from
        the most-represented task (lowest id on ties)."""
        if self.capacity == 0:
            return
        self.stored.append((task_id, demo))
        while len(self.stored) > self.capacity:
            counts = self.task_counts()
            top = max(counts.values())
            victim_task = min(t for t, n in counts.items() if n == top)
            slots = [i for i, (t, _) in enumerate(self.stored) if t == victim_task]
            self.stored.pop(slots[int(rng.integers(len(slots)))])

    def sample_windows(
        self, n: int, rng: np.random.Generator, online_prob: float
    ) -> list[tuple[Demonstration, int, bool]]:
        """n (trajectory, center step, online-form flag) draws with replacement."""
        if not self.stored:
            raise ContractError("cannot sample from an empty buffer")
        out = []
        for _ in range(n):
            _, demo = self.stored[int(rng.integers(len(self.stored)))]
            t = int(rng.integers(len(demo.steps)))
            out.append((demo, t, bool(rng.random() < online_prob)))
        return out


def er_update(buffer: ReplayBuffer, task_id: int, demos: list[Demonstration], rng: np.random.Generator) -> None:
    for demo in demos:
        buffer.add(task_id, demo, rng)


# ---------------------------------------------------------------------------
# packnet


@dataclass
class PackNetState:
    """Element-level task ownership for every maskable backbone parameter.
    -1 marks FREE capacity; owned elements never change owner and never
    receive gradients from later tasks."""

    assignments: dict[str, np.ndarray] = field(default_factory=dict)
    pruned_tasks: list[int] = field(default_factory=list)

    @classmethod
    def for_policy(cls, policy: SkillPolicy) -> "PackNetState":
        return cls(
            assignments={
                name: np.full(p.data.shape, -1, dtype=np.int64)
                for name, p in policy.maskable_parameters().items()
            }
        )


def packnet_set_train_masks(policy: SkillPolicy, state: PackNetState) -> None:
    """Only FREE elements receive gradients during main training."""
    for name, p in policy.maskable_parameters().items():
        p.grad_mask = (state.assignments[name] < 0).astype(float)


def packnet_prune_and_freeze(policy: SkillPolicy, state: PackNetState, task_id: int, keep_ratio: float) -> int:
    """Assign the top keep_ratio of each parameter's FREE elements (by
    magnitude) to task_id; zero the remainder, which stays FREE. Returns the
    number of elements assigned."""
    if task_id in state.pruned_tasks:
        raise ContractError(f"task {task_id} already pruned")
    assigned = 0
    for name, p in policy.maskable_parameters().items():
        owners = state.assignments[name].reshape(-1)
        values = p.data.reshape(-1)
        free = np.nonzero(owners < 0)[0]
        if free.size == 0:
            continue
        n_keep = int(round(free.size * keep_ratio))
        order = np.argsort(-np.abs(values[free]), kind="stable")
        owners[free[order[:n_keep]]] = task_id
        values[free[order[n_keep:]]] = 0.0
        assigned += n_keep
    state.pruned_tasks.append(task_id)
    return assigned


def packnet_finetune_masks(policy: SkillPolicy, state: PackNetState, task_id: int) -> None:
    for name, p in policy.maskable_parameters().items():
        p.grad_mask = (state.assignments[name] == task_id).astype(float)


@contextmanager
def packnet_masked(policy: SkillPolicy, state: PackNetState, task_id: int) -> Iterator[None]:
    """Read the backbone as of task_id: elements owned by later tasks and
    FREE elements read as 0. The codebook is not truncated; restored on exit."""
    params = policy.maskable_parameters()
    stash = {name: p.data.copy() for name, p in params.items()}
    try:
        for name, p in params.items():
            owners = state.assignments[name]
            keep = (owners >= 0) & (owners <= task_id)
            p.data[...] = np.where(keep, p.data, 0.0)
        yield
    finally:
        for name, p in params.items():
            p.data[...] = stash[name]


# ---------------------------------------------------------------------------
# demonstration windows as training data


def action_target(action: Action) -> np.ndarray:
    """Normalized regression target: per-axis displacement relative to the
    actuation cap plus the raw gripper command."""
    return np.array([action.delta_xy[0] / MAX_STEP, action.delta_xy[1] / MAX_STEP, action.gripper_cmd])


def target_to_action(vec: np.ndarray) -> Action:
    return Action(delta_xy=(float(vec[0]) * MAX_STEP, float(vec[1]) * MAX_STEP), gripper_cmd=float(vec[2]))


def _window_batch(
    items: list[tuple[Demonstration, int, bool]], window: int
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """items: (trajectory, center step, online-form flag). Online-form windows
    truncate the episode at the center so the future slots repeat it, exactly
    as closed-loop evaluation sees the world."""
    obs_lists = []
    for demo, t, online in items:
        steps = demo.steps[: t + 1] if online else demo.steps
        obs_lists.append([s[0] for s in steps])
    centers = [t for _, t, _ in items]
    batch = stack_windows(obs_lists, centers, window)
    actions = np.stack([action_target(demo.steps[t][1]) for demo, t, _ in items])
    return batch, actions


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    policy: SkillPolicy,
    task: TaskSpec,
    n_episodes: int,
    rng: np.random.Generator | int,
    *,
    use_prefix: bool = True,
    use_adapters: bool = True,
    use_hierarchy: bool = True,
    usage_sink: list | None = None,
) -> float:
    """Success rate over n_episodes fresh stochastic rollouts, lockstepped in
    one batch per timestep. Online windows repeat the current observation in
    future slots."""
    if n_episodes <= 0:
        raise ContractError("evaluate needs n_episodes >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))

    states = [reset(task, rng) for _ in range(n_episodes)]
    histories = [[observe(s, task)] for s in states]
    running = list(range(n_episodes))
    succeeded = [False] * n_episodes
    window = policy.config.window

    for t in range(task.horizon):
        if not running:
            break
        batch = stack_windows([histories[i] for i in running], [t] * len(running), window)
        sink: list = []
        params = policy.forward(
            batch, task.task_id, use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, selection_sink=sink
        )
        if usage_sink is not None and sink:
            usage_sink.append((task.task_id, sink[0].indices.reshape(-1).copy()))
        acts = sample_action(params, rng)
        still = []
        for row, i in enumerate(running):
            states[i], done, success = step(states[i], target_to_action(acts[row]), task)
            histories[i].append(observe(states[i], task))
            if success:
                succeeded[i] = True
            if not done:
                still.append(i)
        running = still
    return sum(succeeded) / n_episodes


# ---------------------------------------------------------------------------
# per-task training


@dataclass
class TaskCurve:
    eval_points: list[int]
    diag: np.ndarray  # (E,) NaN after an early-stopping halt
    cross: np.ndarray  # (n_prior, E) success on earlier tasks, NaN after halt
    halted_at: int | None  # epoch of the halt, None if trained to the end


def _should_halt(rates: list[float], threshold: float) -> bool:
    if max(rates, default=0.0) < threshold:
        return False
    return len(rates) >= 3 and rates[-1] < rates[-2] < rates[-3]


def _train_epoch(
    policy: SkillPolicy,
    optimizer: AdamW,
    demos: list[Demonstration],
    task_id: int,
    cfg: TrainConfig,
    epoch_rng: np.random.Generator,
    replay: tuple[ReplayBuffer, np.random.Generator] | None,
    use_prefix: bool,
    use_adapters: bool,
    use_hierarchy: bool,
) -> float:
    pairs = [(demo, t) for demo in demos for t in range(len(demo.steps))]
    order = epoch_rng.permutation(len(pairs))
    online = epoch_rng.random(len(pairs)) < cfg.online_window_prob
    total, seen = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        chosen = order[start : start + cfg.batch_size]
        items = [pairs[i] + (bool(online[i]),) for i in chosen]
        if replay is not None:
            buffer, replay_rng = replay
            if len(buffer):
                items = items + buffer.sample_windows(len(items), replay_rng, cfg.online_window_prob)
        batch, actions = _window_batch(items, policy.config.window)
        with Tape():
            loss = bc_loss(policy.forward(batch, task_id, use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy), actions)
            ag.backward(loss, optimizer.params)
        if cfg.grad_clip:
            clip_grad_norm(optimizer.params, cfg.grad_clip)
        optimizer.step()
        total += float(loss.data) * len(items)
        seen += len(items)
    return total / max(seen, 1)


def train_task(
    policy: SkillPolicy,
    task: TaskSpec,
    demos: list[Demonstration],
    paradigm: ParadigmConfig,
    cfg: TrainConfig,
    *,
    prior_tasks: list[TaskSpec] = (),
    buffer: ReplayBuffer | None = None,
    packnet: PackNetState | None = None,
    usage_sink: list | None = None,
    use_prefix: bool = True,
    use_adapters: bool = True,
    use_hierarchy: bool = True,
) -> TaskCurve:
    """One lifelong step: register the task, fit its demos under the paradigm
    rules, and record success on this and all earlier tasks at each eval
    point. Stops early once success has reached the threshold and then
    declined at two consecutive evaluations."""
    k = task.task_id
    if k != len(policy.registered_tasks):
        raise ContractError(
            f"tasks must be trained in order: expected task {len(policy.registered_tasks)}, got {k}"
        )
    if [t.task_id for t in prior_tasks] != list(range(k)):
        raise ContractError("prior_tasks must be the already-trained tasks in order")

    # task hooks: codebook rows, adapter factors, language row
    policy.register_task(k, _rng(cfg.seed, _TAG_REGISTER, k))
    trainable_rows = [k] if paradigm.kind == "packnet" else list(range(k + 1))
    policy.perception.language.set_trainable_rows(trainable_rows)
    if packnet is not None:
        packnet_set_train_masks(policy, packnet)

    optimizer = AdamW(list(policy.named_parameters().values()), lr=cfg.lr, weight_decay=cfg.weight_decay)

    points = cfg.eval_points
    diag = np.full(len(points), np.nan)
    cross = np.full((k, len(points)), np.nan)

    def run_evals(point_idx: int) -> None:
        diag[point_idx] = evaluate(
            policy, task, cfg.eval_episodes, _rng(cfg.seed, _TAG_EVAL, k, k, point_idx),
            use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, usage_sink=usage_sink,
        )
        for j, prev in enumerate(prior_tasks):
            eval_rng = _rng(cfg.seed, _TAG_EVAL, k, j, point_idx)
            if packnet is not None:
                with packnet_masked(policy, packnet, j):
                    rate = evaluate(policy, prev, cfg.eval_episodes, eval_rng,
                                    use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, usage_sink=usage_sink)
            else:
                rate = evaluate(policy, prev, cfg.eval_episodes, eval_rng,
                                use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, usage_sink=usage_sink)
            cross[j, point_idx] = rate

    halted_at = None
    run_evals(0)
    recorded = [float(diag[0])]
    for epoch in range(1, cfg.epochs + 1):
        replay = None
        if paradigm.kind == "er" and buffer is not None:
            replay = (buffer, _rng(cfg.seed, _TAG_REPLAY, k, epoch))
        _train_epoch(
            policy, optimizer, demos, k, cfg, _rng(cfg.seed, _TAG_EPOCH, k, epoch),
            replay, use_prefix, use_adapters, use_hierarchy,
        )
        if epoch % cfg.eval_every == 0:
            idx = points.index(epoch)
            run_evals(idx)
            recorded.append(float(diag[idx]))
            if _should_halt(recorded, cfg.early_stop_threshold):
                halted_at = epoch
                break

    return TaskCurve(eval_points=points, diag=diag, cross=cross, halted_at=halted_at)


def packnet_post_task(
    policy: SkillPolicy,
    state: PackNetState,
    task: TaskSpec,
    demos: list[Demonstration],
    paradigm: ParadigmConfig,
    cfg: TrainConfig,
    *,
    use_prefix: bool = True,
    use_adapters: bool = True,
    use_hierarchy: bool = True,
) -> None:
    """Prune free capacity down to this task's share and briefly fine-tune
    the surviving elements to recover from the cut."""
    packnet_prune_and_freeze(policy, state, task.task_id, paradigm.packnet_keep_ratio)
    if paradigm.packnet_finetune_epochs == 0:
        return
    packnet_finetune_masks(policy, state, task.task_id)
    optimizer = AdamW(list(policy.named_parameters().values()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(1, paradigm.packnet_finetune_epochs + 1):
        _train_epoch(
            policy, optimizer, demos, task.task_id, cfg,
            _rng(cfg.seed, _TAG_EPOCH, task.task_id, cfg.epochs + epoch),
            None, use_prefix, use_adapters, use_hierarchy,
        )


# ---------------------------------------------------------------------------
# full runs


@dataclass
class LifelongResult:
    paradigm: str
    record: SuccessRecord | None
    usage_events: list[tuple[int, np.ndarray]]
    policy: SkillPolicy
    multitask_curve: np.ndarray | None = None  # (E, K) for the joint paradigm
    mean_success: float | None = None


def build_policy(model_cfg: ModelConfig, n_tasks: int, seed: int, paradigm: ParadigmConfig) -> SkillPolicy:
    return SkillPolicy(
        model_cfg, n_tasks, _rng(seed, _TAG_MODEL), shared_adapter_factors=not paradigm.per_task_adapter_factors
    )


def run_lifelong(
    tasks: list[TaskSpec],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    paradigm: ParadigmConfig,
    *,
    use_prefix: bool = True,
    use_adapters: bool = True,
    use_hierarchy: bool = True,
    task_callback=None,
) -> LifelongResult:
    """Train the whole task sequence under one paradigm and assemble the
    success record. task_callback(k, policy), when given, runs after each
    task (checkpointing hook)."""
    if paradigm.kind == "multitask":
        return run_multitask(tasks, model_cfg, cfg, paradigm,
                             use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, task_callback=task_callback)

    policy = build_policy(model_cfg, len(tasks), cfg.seed, paradigm)
    buffer = ReplayBuffer(paradigm.er_capacity if paradigm.kind == "er" else 0)
    packnet = PackNetState.for_policy(policy) if paradigm.kind == "packnet" else None

    K, points = len(tasks), cfg.eval_points
    diag_raw = np.full((K, len(points)), np.nan)
    offdiag = np.full((K, K, len(points)), np.nan)
    usage: list[tuple[int, np.ndarray]] = []

    for k, task in enumerate(tasks):
        demos = collect_demos(task, cfg.n_demos, cfg.seed)
        curve = train_task(
            policy, task, demos, paradigm, cfg,
            prior_tasks=tasks[:k], buffer=buffer, packnet=packnet, usage_sink=usage,
            use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy,
        )
        diag_raw[k] = curve.diag
        offdiag[k, :k, :] = curve.cross
        if paradigm.kind == "packnet":
            packnet_post_task(policy, packnet, task, demos, paradigm, cfg,
                              use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy)
        if paradigm.kind == "er":
            er_update(buffer, k, demos, _rng(cfg.seed, _TAG_EVICT, k))
        if task_callback is not None:
            task_callback(k, policy)

    record = SuccessRecord(n_tasks=K, eval_points=points, diag_raw=diag_raw, offdiag=offdiag)
    return LifelongResult(paradigm=paradigm.kind, record=record, usage_events=usage, policy=policy)


def run_multitask(
    tasks: list[TaskSpec],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    paradigm: ParadigmConfig,
    *,
    use_prefix: bool = True,
    use_adapters: bool = True,
    use_hierarchy: bool = True,
    task_callback=None,
) -> LifelongResult:
    """Joint training on the union of all demonstrations; reports per-task
    success at each eval point and the final average (the upper-bound row)."""
    policy = build_policy(model_cfg, len(tasks), cfg.seed, paradigm)
    for k in range(len(tasks)):
        policy.register_task(k, _rng(cfg.seed, _TAG_REGISTER, k))
    policy.codebook.unfreeze_all()
    policy.perception.language.set_trainable_rows(list(range(len(tasks))))

    demos_by_task = [collect_demos(task, cfg.n_demos, cfg.seed) for task in tasks]
    pooled = [demo for demos in demos_by_task for demo in demos]
    optimizer = AdamW(list(policy.named_parameters().values()), lr=cfg.lr, weight_decay=cfg.weight_decay)

    K, points = len(tasks), cfg.eval_points
    curve = np.full((len(points), K), np.nan)
    usage: list[tuple[int, np.ndarray]] = []
    tag = K  # pseudo-task id for seed streams

    def run_evals(point_idx: int) -> None:
        for j, task in enumerate(tasks):
            curve[point_idx, j] = evaluate(
                policy, task, cfg.eval_episodes, _rng(cfg.seed, _TAG_EVAL, tag, j, point_idx),
                use_prefix=use_prefix, use_adapters=use_adapters, use_hierarchy=use_hierarchy, usage_sink=usage,
            )

    run_evals(0)
    for epoch in range(1, cfg.epochs + 1):
        # language ids ride along in each window, so one mixed batch trains
        # every task; the shared adapter factors make task_id immaterial
        _train_epoch(policy, optimizer, pooled, tasks[0].task_id, cfg,
                     _rng(cfg.seed, _TAG_EPOCH, tag, epoch), None, use_prefix, use_adapters, use_hierarchy)
        if epoch % cfg.eval_every == 0:
            run_evals(points.index(epoch))
    if task_callback is not None:
        task_callback(K - 1, policy)
    return LifelongResult(
        paradigm="multitask", record=None, usage_events=usage, policy=policy,
        multitask_curve=curve, mean_success=float(curve[-1].mean()),
    )
