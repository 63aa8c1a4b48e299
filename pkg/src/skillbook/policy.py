"""End-to-end policy: perception tokens -> skill-prefixed transformer ->
latent skill sequence -> second transformer -> GMM action head.

One skill selection per window conditions both transformer levels through a
single synthesized key/value prefix pair. Per-block low-rank adapters carry
the task-specific component. The head emits a diagonal-covariance Gaussian
mixture over normalized actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParamGroup, Parameter, Tensor
from .adapters import CPAdapter
from .codebook import SkillCodebook, SkillSelection, select_skills, synthesize
from .errors import ConfigError, ContractError
from .perception import MODALITIES, PerceptionEncoder
from .transformer import Linear, TemporalTransformer

LOG_TWO_PI = math.log(2.0 * math.pi)
SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0
ACTION_DIM = 3  # normalized (dx, dy, gripper)


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    n_blocks: int = 2
    window: int = 10
    rows_per_task: int = 10
    top_c: int = 10
    rank_cp: int = 8
    n_components: int = 5
    action_dim: int = ACTION_DIM
    enc_hidden: int = 0  # 0 -> 2*d
    mlp_hidden: int = 0  # 0 -> 4*d
    # initial log sigma of every mixture component. exp(-1) ~ 0.37 keeps the
    # per-dimension loss weights near-uniform early (so rare decisions such as
    # gripper flips are not drowned out) without starting so wide that the
    # stds spend hundreds of epochs annealing down to the residual scale
    log_std_init: float = -1.0

    def __post_init__(self):
        if self.enc_hidden == 0:
            self.enc_hidden = 2 * self.d
        if self.mlp_hidden == 0:
            self.mlp_hidden = 4 * self.d
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.window % 2 != 0:
            raise ConfigError(f"window must be even, got {self.window}")

    @property
    def center_step_start(self) -> int:
        """First token index of the window-center step's modality group."""
        return (self.window // 2 - 1) * MODALITIES


@dataclass
class GMMParams:
    means: Tensor  # (B, R, action_dim)
    log_stds: Tensor  # (B, R, action_dim)
    logits: Tensor  # (B, R)


class SkillPolicy(ParamGroup):
    def __init__(self, config: ModelConfig, n_tasks: int, rng: np.random.Generator, shared_adapter_factors: bool):
        super().__init__()
        c = config
        self.config = c
        self.n_tasks = n_tasks
        self.perception = self.child(
            "perception", PerceptionEncoder(c.d, c.window, n_tasks, c.enc_hidden, rng)
        )
        self.skill_tf = self.child(
            "skill_tf", TemporalTransformer(c.d, c.heads, c.n_blocks, c.mlp_hidden, rng)
        )
        self.action_tf = self.child(
            "action_tf", TemporalTransformer(c.d, c.heads, c.n_blocks, c.mlp_hidden, rng)
        )
        head_out = c.n_components * (c.action_dim + 1)
        # the head reads every modality token of the decision step; residual
        # paths keep near-raw wrist/proprio features available to it
        self.head1 = self.child("head1", Linear(MODALITIES * c.d, c.enc_hidden, rng))
        self.head2 = self.child("head2", Linear(c.enc_hidden, head_out, rng, scale=0.05))
        # spread the components' gripper means over the command range so
        # mixture responsibilities split by mode from the first step instead
        # of collapsing onto the marginal mean
        if c.n_components > 1:
            bias = self.head2.b.data.reshape(c.n_components, c.action_dim + 1)
            bias[:, 2] = np.linspace(-1.0, 1.0, c.n_components)
        # log-stds are state-independent learned parameters: a per-state sigma
        # lets the loss down-weight exactly the rare decisions it most needs
        # to fit, so the head only emits means and mixture logits
        self.log_std = self.param(
            "log_std", np.full((c.n_components, c.action_dim), float(c.log_std_init))
        )
        self.log_std.decay = False  # decay would drag the stds toward sigma = 1

        self.codebook = SkillCodebook(c.d, c.rows_per_task)
        self.skill_adapters = [
            CPAdapter(c.d, c.rank_cp, f"adapter.skill{i}", shared_adapter_factors) for i in range(c.n_blocks)
        ]
        self.action_adapters = [
            CPAdapter(c.d, c.rank_cp, f"adapter.action{i}", shared_adapter_factors) for i in range(c.n_blocks)
        ]
        self.registered_tasks: list[int] = []

    # -- task lifecycle ----------------------------------------------------

    def register_task(self, task_id: int, rng: np.random.Generator) -> None:
        if task_id in self.registered_tasks:
            raise ContractError(f"task {task_id} already registered")
        self.codebook.expand_for_task(task_id, rng)
        for adapter in self.skill_adapters + self.action_adapters:
            adapter.add_task(task_id, rng)
        self.registered_tasks.append(task_id)

    # -- parameter access ----------------------------------------------------

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = super().named_parameters(prefix)
        out.update({prefix + k: v for k, v in self.codebook.named_parameters().items()})
        for adapter in self.skill_adapters + self.action_adapters:
            out.update({prefix + k: v for k, v in adapter.named_parameters().items()})
        return out

    def maskable_parameters(self) -> dict[str, Parameter]:
        """Backbone weights eligible for magnitude pruning: everything in the
        module tree except the language table and the mixture log-stds (zeroing
        a log-std means sigma = 1, not "off"); the codebook and adapters govern
        their own freezing."""
        return {
            name: p
            for name, p in super().named_parameters().items()
            if not name.startswith("perception.language") and name != "log_std"
        }

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        batch: dict[str, np.ndarray],
        task_id: int,
        use_prefix: bool = True,
        use_adapters: bool = True,
        use_hierarchy: bool = True,
        attn_sink: list | None = None,
        selection_sink: list | None = None,
    ) -> GMMParams:
        c = self.config
        s_e = self.perception.encode_window(batch)  # (B, L, d)

        prefix = None
        if use_prefix:
            selection = select_skills(s_e, self.codebook, c.top_c)
            if selection_sink is not None:
                selection_sink.append(selection)
            prefix = synthesize(selection, self.codebook)

        skill_adp = self.skill_adapters if use_adapters else None
        act_adp = self.action_adapters if use_adapters else None
        if use_hierarchy:
            z = self.skill_tf.forward(s_e, prefix, skill_adp, task_id, attn_sink)
        else:
            z = s_e  # flat baseline: no intermediate latent-skill level
        y = self.action_tf.forward(z, prefix, act_adp, task_id, attn_sink)

        B = y.data.shape[0]
        feat = ag.reshape(ag.narrow(y, 1, c.center_step_start, MODALITIES), (B, MODALITIES * c.d))
        out = self.head2(ag.gelu(self.head1(feat)))

        R, ad = c.n_components, c.action_dim
        means = ag.reshape(ag.narrow(out, 1, 0, R * ad), (B, R, ad))
        log_stds = ag.expand(ag.reshape(self.log_std.value, (1, R, ad)), (B, R, ad))
        logits = ag.narrow(out, 1, R * ad, R)
        return GMMParams(means=means, log_stds=log_stds, logits=logits)


# ---------------------------------------------------------------------------
# mixture density


def gmm_sigma(log_stds: Tensor) -> Tensor:
    # pass-through clamp: a component stuck at the floor keeps receiving the
    # widen-me gradient and can recover instead of going dead
    return ag.clamp_pass(ag.exp(log_stds), SIGMA_MIN, SIGMA_MAX)


def gmm_nll(params: GMMParams, actions: np.ndarray | Tensor) -> Tensor:
    """Per-item negative log-likelihood, (B,). Stable log-sum-exp over
    components; diagonal covariance per dimension."""
    a = ag.as_tensor(actions)
    B, R, ad = params.means.data.shape
    a3 = ag.reshape(a, (B, 1, ad))
    sigma = gmm_sigma(params.log_stds)
    z = ag.div(ag.sub(a3, params.means), sigma)
    comp = ag.sum_(
        ag.sub(ag.mul(ag.constant(-0.5), ag.mul(z, z)), ag.add(ag.log(sigma), ag.constant(0.5 * LOG_TWO_PI))),
        axis=-1,
    )  # (B, R)
    log_eta = ag.sub(params.logits, ag.log_sum_exp(params.logits, axis=-1, keepdims=True))
    return ag.neg(ag.log_sum_exp(ag.add(log_eta, comp), axis=-1))


def bc_loss(params: GMMParams, actions: np.ndarray) -> Tensor:
    """Mean NLL over a batch of (window, action) pairs."""
    return ag.mean(gmm_nll(params, actions))


def mixture_eta(params: GMMParams) -> np.ndarray:
    logits = params.logits.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sample_action(params: GMMParams, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
    """Draw one action per batch item. Stochastic: component ~ Categorical(eta)
    then a diagonal Gaussian draw; deterministic: mean of the heaviest
    component."""
    means = params.means.data
    sigma = np.clip(np.exp(params.log_stds.data), SIGMA_MIN, SIGMA_MAX)
    eta = mixture_eta(params)
    B, R, ad = means.shape
    if deterministic:
        comp = eta.argmax(axis=-1)
        return means[np.arange(B), comp]
    cdf = eta.cumsum(axis=-1)
    u = rng.random((B, 1))
    comp = (u > cdf).sum(axis=-1)
    comp = np.minimum(comp, R - 1)
    mu = means[np.arange(B), comp]
    sd = sigma[np.arange(B), comp]
    return mu + sd * rng.standard_normal((B, ad))
