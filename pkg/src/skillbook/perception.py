"""Multimodal encoders fusing views, proprioception, and language into the
per-window token sequence.

Every timestep of a 10-step window contributes five width-d tokens in a
fixed order: workspace view, wrist view, proprioception, language, and a
learned per-slot context token (the context token doubles as the positional
signal). Both view encoders are two-layer MLPs whose hidden features are
modulated by FiLM parameters generated from the language token.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ParamGroup, Tensor
from .envs import PROPRIO_DIM, VIEW_DIM, Observation
from .errors import ConfigError, ContractError
from .transformer import Linear

MODALITIES = 5


class FiLM(ParamGroup):
    """Per-channel affine modulation (1 + gamma) * x + beta with gamma and
    beta generated from a conditioning vector by a zero-initialized linear
    map, so modulation starts as the identity."""

    def __init__(self, cond_dim: int, n_channels: int, rng: np.random.Generator):
        super().__init__()
        self.n_channels = n_channels
        self.gen = self.child("gen", Linear(cond_dim, 2 * n_channels, rng, zero_init=True))

    def __call__(self, features: Tensor, cond: Tensor) -> Tensor:
        gb = self.gen(cond)  # (B, 2*channels)
        B = gb.data.shape[0]
        gamma = ag.reshape(ag.narrow(gb, 1, 0, self.n_channels), (B, 1, self.n_channels))
        beta = ag.reshape(ag.narrow(gb, 1, self.n_channels, self.n_channels), (B, 1, self.n_channels))
        return ag.add(ag.mul(features, ag.add(gamma, ag.constant(1.0))), beta)


class ViewEncoder(ParamGroup):
    def __init__(self, in_dim: int, hidden: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.l1 = self.child("l1", Linear(in_dim, hidden, rng))
        self.film = self.child("film", FiLM(d, hidden, rng))
        self.l2 = self.child("l2", Linear(hidden, d, rng))

    def __call__(self, x: Tensor, lang: Tensor) -> Tensor:
        h = self.film(self.l1(x), lang)
        return self.l2(ag.gelu(h))


class ProprioEncoder(ParamGroup):
    def __init__(self, in_dim: int, hidden: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.l1 = self.child("l1", Linear(in_dim, hidden, rng))
        self.l2 = self.child("l2", Linear(hidden, d, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(ag.gelu(self.l1(x)))


class LanguageTable(ParamGroup):
    """One learned d-vector per task descriptor. Rows freeze individually so
    finished tasks keep their embedding bit-identical."""

    def __init__(self, n_tasks: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.n_tasks = n_tasks
        self.table = self.param("table", rng.standard_normal((n_tasks, d)))
        self.table.grad_mask = np.zeros_like(self.table.data)

    def set_trainable_rows(self, rows: list[int]) -> None:
        self.table.grad_mask = np.zeros_like(self.table.data)
        for r in rows:
            self.table.grad_mask[r] = 1.0

    def lookup(self, language_ids: np.ndarray) -> Tensor:
        ids = np.asarray(language_ids)
        if ids.min(initial=0) < 0 or ids.max(initial=-1) >= self.n_tasks:
            raise ConfigError(f"language id outside table of size {self.n_tasks}")
        return ag.take(self.table.value, ids)


class PerceptionEncoder(ParamGroup):
    """Turns a batch of observation windows into (B, window*5, d) tokens."""

    def __init__(self, d: int, window: int, n_tasks: int, enc_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.window = window
        self.language = self.child("language", LanguageTable(n_tasks, d, rng))
        self.workspace = self.child("workspace", ViewEncoder(VIEW_DIM, enc_hidden, d, rng))
        self.wrist = self.child("wrist", ViewEncoder(VIEW_DIM, enc_hidden, d, rng))
        self.proprio = self.child("proprio", ProprioEncoder(PROPRIO_DIM, enc_hidden, d, rng))
        self.context = self.param("context", rng.standard_normal((window, d)) * 0.02)

    def encode_window(self, batch: dict[str, np.ndarray]) -> Tensor:
        """batch arrays: workspace (B,W,V), wrist (B,W,V), proprio (B,W,3),
        language_id (B,). Output (B, W*5, d) with step-major token order."""
        ws, wr, pr = batch["workspace"], batch["wrist"], batch["proprio"]
        ids = batch["language_id"]
        B = ws.shape[0]
        if ws.shape[1] != self.window or wr.shape[1] != self.window or pr.shape[1] != self.window:
            raise ContractError(f"window length must be {self.window}, got {ws.shape[1]}")

        lang = self.language.lookup(ids)  # (B, d)
        ws_tok = self.workspace(ag.constant(ws), lang)  # (B, W, d)
        wr_tok = self.wrist(ag.constant(wr), lang)
        pr_tok = self.proprio(ag.constant(pr))
        lang_tok = ag.expand(ag.reshape(lang, (B, 1, self.d)), (B, self.window, self.d))
        ctx_tok = ag.expand(ag.reshape(self.context.value, (1, self.window, self.d)), (B, self.window, self.d))

        stacked = ag.concat(
            [ag.reshape(t, (B, self.window, 1, self.d)) for t in (ws_tok, wr_tok, pr_tok, lang_tok, ctx_tok)],
            axis=2,
        )  # (B, W, 5, d)
        return ag.reshape(stacked, (B, self.window * MODALITIES, self.d))


def window_indices(t: int, length: int, window: int) -> list[int]:
    """Indices of the observation window centered at step t: {t-4, ..., t+5}
    for window 10, clamped to the available episode so the first observation
    pads the past and the last available one pads the future."""
    half = window // 2
    lo = t - (half - 1)
    return [min(max(i, 0), length - 1) for i in range(lo, lo + window)]


def stack_windows(
    observations_per_item: list[list[Observation]], centers: list[int], window: int
) -> dict[str, np.ndarray]:
    """Assemble batch arrays from per-item episode observations and center
    steps, applying the clamped-window padding rule."""
    ws, wr, pr, ids = [], [], [], []
    for obs_list, t in zip(observations_per_item, centers):
        idx = window_indices(t, len(obs_list), window)
        ws.append([obs_list[i].workspace_view for i in idx])
        wr.append([obs_list[i].wrist_view for i in idx])
        pr.append([obs_list[i].proprio for i in idx])
        ids.append(obs_list[0].language_id)
    return {
        "workspace": np.asarray(ws),
        "wrist": np.asarray(wr),
        "proprio": np.asarray(pr),
        "language_id": np.asarray(ids, dtype=np.int64),
    }
