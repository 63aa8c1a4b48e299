"""Temporal transformer decoder blocks with prefix-augmented cross-attention.

Each block runs self-attention, then a cross-attention whose keys and values
come from the block's own input stream but can be extended, post-projection,
with one synthesized key/value prefix pair, then an MLP. All eight attention
projections of a block route through an optional low-rank task adapter.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ParamGroup, Tensor
from .adapters import CPAdapter
from .errors import ConfigError, ShapeError


class Linear(ParamGroup):
    def __init__(
        self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False, scale: float = 1.0
    ):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(n_in))
        self.W = self.param("W", w)
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.W.value), self.b.value)


class LayerNorm(ParamGroup):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain.value, self.bias.value)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.data.shape
    return ag.transpose(ag.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.data.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, sink: list | None) -> Tensor:
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    dh = qh.data.shape[-1]
    scores = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))), ag.constant(1.0 / math.sqrt(dh)))
    attn = ag.softmax(scores, axis=-1)
    if sink is not None:
        sink.append(attn.data)
    return _merge_heads(ag.matmul(attn, vh))


class DecoderBlock(ParamGroup):
    """Self-attention, prefix-receptive cross-attention, MLP; pre-norm
    residual wiring. Adapter slots 0-3 cover self-attention q/k/v/out,
    slots 4-7 the cross-attention."""

    def __init__(self, d: int, heads: int, mlp_hidden: int, rng: np.random.Generator):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.ln3 = self.child("ln3", LayerNorm(d))
        for name in ("sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_k", "ca_v", "ca_o"):
            self.child(name, Linear(d, d, rng))
        self.child("mlp1", Linear(d, mlp_hidden, rng))
        self.child("mlp2", Linear(mlp_hidden, d, rng))

    def _proj(self, x: Tensor, name: str, slot: int, adapter: CPAdapter | None, task_id: int) -> Tensor:
        y = self._children[name](x)
        if adapter is not None:
            y = ag.add(y, adapter.apply(x, slot, task_id))
        return y

    def forward(
        self,
        x: Tensor,
        prefix: tuple[Tensor, Tensor] | None,
        adapter: CPAdapter | None,
        task_id: int,
        attn_sink: list | None = None,
    ) -> Tensor:
        h = self.ln1(x)
        sa = _attend(
            self._proj(h, "sa_q", 0, adapter, task_id),
            self._proj(h, "sa_k", 1, adapter, task_id),
            self._proj(h, "sa_v", 2, adapter, task_id),
            self.heads,
            attn_sink,
        )
        x = ag.add(x, self._proj(sa, "sa_o", 3, adapter, task_id))

        h = self.ln2(x)
        k = self._proj(h, "ca_k", 5, adapter, task_id)
        v = self._proj(h, "ca_v", 6, adapter, task_id)
        if prefix is not None:
            p_k, p_v = prefix
            if p_k.data.shape[-1] != self.d:
                raise ShapeError(f"prefix width {p_k.data.shape[-1]} != model width {self.d}")
            k = ag.concat([p_k, k], axis=1)
            v = ag.concat([p_v, v], axis=1)
        ca = _attend(self._proj(h, "ca_q", 4, adapter, task_id), k, v, self.heads, attn_sink)
        x = ag.add(x, self._proj(ca, "ca_o", 7, adapter, task_id))

        h = self.ln3(x)
        x = ag.add(x, self._children["mlp2"](ag.gelu(self._children["mlp1"](h))))
        return x


class TemporalTransformer(ParamGroup):
    def __init__(self, d: int, heads: int, n_blocks: int, mlp_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.n_blocks = n_blocks
        self.blocks = [self.child(f"block{i}", DecoderBlock(d, heads, mlp_hidden, rng)) for i in range(n_blocks)]
        self.final_ln = self.child("final_ln", LayerNorm(d))

    def forward(
        self,
        x: Tensor,
        prefix: tuple[Tensor, Tensor] | None = None,
        adapters: Sequence[CPAdapter] | None = None,
        task_id: int = 0,
        attn_sink: list | None = None,
    ) -> Tensor:
        if adapters is not None and len(adapters) != self.n_blocks:
            raise ConfigError(f"need {self.n_blocks} adapters, got {len(adapters)}")
        for i, block in enumerate(self.blocks):
            adapter = adapters[i] if adapters is not None else None
            x = block.forward(x, prefix, adapter, task_id, attn_sink)
        return self.final_ln(x)
