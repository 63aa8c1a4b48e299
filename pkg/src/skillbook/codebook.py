"""Growable skill codebook with attention-driven top-C selection.

Each task appends a block of rows to three aligned matrices: skill vectors P
(a key/value prefix pair per row), match keys K, and feature-attention
vectors A. New rows are Gram-Schmidt orthogonalized against everything
already present and unit-normalized; rows belonging to earlier tasks freeze
when a new block arrives. Selection always scores the whole codebook, so a
later task can reuse any earlier skill.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ContractError

_RESIDUAL_FLOOR = 1e-10
_GS_RETRIES = 20


def _orthonormal_rows(existing: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sample `count` unit rows orthogonal to `existing` rows and each other.

    Sequential Gram-Schmidt; a row whose residual collapses (span exhausted)
    is resampled, and if the space is genuinely full the best effort is kept.
    """
    d = existing.shape[1]
    rows = [existing[i] for i in range(existing.shape[0])]
    out = []
    for _ in range(count):
        v = None
        for _ in range(_GS_RETRIES):
            cand = rng.standard_normal(d)
            for u in rows:
                cand = cand - (cand @ u) * u
            norm = np.linalg.norm(cand)
            if norm >= _RESIDUAL_FLOOR:
                v = cand / norm
                break
        if v is None:  # more rows than dimensions; keep a normalized sample
            cand = rng.standard_normal(d)
            v = cand / np.linalg.norm(cand)
        rows.append(v)
        out.append(v)
    return np.stack(out)


@dataclass
class SkillSelection:
    indices: np.ndarray  # (B, C) selected row ids
    weights: Tensor  # (B, C) softmax over the selected similarities
    full_similarities: Tensor  # (B, m)


class SkillCodebook:
    """Holds P (m,2,d), K (m,d), A (m,d) plus per-task row bounds."""

    def __init__(self, d: int, rows_per_task: int = 10):
        self.d = d
        self.rows_per_task = rows_per_task
        self.P = Parameter(np.zeros((0, 2, d)), name="codebook.P")
        self.K = Parameter(np.zeros((0, d)), name="codebook.K")
        self.A = Parameter(np.zeros((0, d)), name="codebook.A")
        self.subset_bounds: list[tuple[int, int, int]] = []  # (task_id, start, end)
        self.frozen_upto = 0

    @property
    def size(self) -> int:
        return self.K.data.shape[0]

    def expand_for_task(self, task_id: int, rng: np.random.Generator) -> None:
        if any(b[0] == task_id for b in self.subset_bounds):
            raise ContractError(f"codebook already has a subset for task {task_id}")
        m_old = self.size
        M = self.rows_per_task

        new_k = _orthonormal_rows(self.K.data, M, rng)
        new_a = _orthonormal_rows(self.A.data, M, rng)
        new_p0 = _orthonormal_rows(self.P.data[:, 0, :], M, rng)
        new_p1 = _orthonormal_rows(self.P.data[:, 1, :], M, rng)
        new_p = np.stack([new_p0, new_p1], axis=1)

        self.P = Parameter(np.concatenate([self.P.data, new_p]), name="codebook.P")
        self.K = Parameter(np.concatenate([self.K.data, new_k]), name="codebook.K")
        self.A = Parameter(np.concatenate([self.A.data, new_a]), name="codebook.A")
        self.subset_bounds.append((task_id, m_old, m_old + M))
        self.frozen_upto = m_old
        self._apply_row_freezing()

    def _apply_row_freezing(self) -> None:
        for p in (self.P, self.K, self.A):
            mask = np.ones_like(p.data)
            mask[: self.frozen_upto] = 0.0
            p.grad_mask = mask

    def freeze_all(self) -> None:
        """End-of-run state: every row frozen until the next expansion."""
        self.frozen_upto = self.size
        self._apply_row_freezing()

    def unfreeze_all(self) -> None:
        """Joint-training mode: every row trainable at once."""
        self.frozen_upto = 0
        self._apply_row_freezing()

    def parameters(self) -> list[Parameter]:
        return [self.P, self.K, self.A]

    def named_parameters(self) -> dict[str, Parameter]:
        return {"codebook.P": self.P, "codebook.K": self.K, "codebook.A": self.A}

    def subset_of(self, row: int) -> int:
        for task_id, start, end in self.subset_bounds:
            if start <= row < end:
                return task_id
        raise ContractError(f"row {row} outside all subsets")


def select_skills(s_e: Tensor, codebook: SkillCodebook, top_c: int) -> SkillSelection:
    """Score every codebook row against the state embedding and keep the
    top-C.

    Per row i the query is the L-mean of the embedding gated by A_i (the mean
    commutes with the per-row Hadamard gate, so the gate applies after
    pooling), similarity is cosine(query_i, K_i), and the kept similarities
    renormalize through a softmax. Ties break toward the lower row index.
    """
    m = codebook.size
    if m == 0:
        raise ContractError("codebook is empty; expand it for a task first")
    if top_c > m:
        raise ContractError(f"top_c={top_c} exceeds codebook size {m}")

    pooled = ag.mean(s_e, axis=1)  # (B, d)
    B = pooled.data.shape[0]
    queries = ag.mul(ag.reshape(pooled, (B, 1, codebook.d)), codebook.A.value)  # (B, m, d)
    alpha = ag.cosine_similarity(queries, codebook.K.value)  # (B, m)

    order = np.argsort(-alpha.data, axis=1, kind="stable")
    indices = order[:, :top_c]
    picked = ag.take_along(alpha, indices)  # (B, C)
    weights = ag.softmax(picked, axis=-1)
    return SkillSelection(indices=indices, weights=weights, full_similarities=alpha)


def synthesize(selection: SkillSelection, codebook: SkillCodebook) -> tuple[Tensor, Tensor]:
    """Blend the selected skill rows into one prefix pair (p_K, p_V), each
    shaped (B, 1, d)."""
    B, C = selection.indices.shape
    rows = ag.take(codebook.P.value, selection.indices.reshape(-1))  # (B*C, 2, d)
    rows = ag.reshape(rows, (B, C, 2, codebook.d))
    w = ag.reshape(selection.weights, (B, C, 1, 1))
    blended = ag.sum_(ag.mul(rows, w), axis=1)  # (B, 2, d)
    p_k = ag.narrow(blended, 1, 0, 1)
    p_v = ag.narrow(blended, 1, 1, 1)
    return p_k, p_v
