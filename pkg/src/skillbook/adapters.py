"""Low-rank task adapters over the stacked attention projections of a block.

The full per-task weight perturbation is a rank-R CP tensor
W[i, j, slot] = sum_r lam_r * u_r[i] * v_r[j] * q_r[slot] over the block's
eight attention projections (query/key/value/output for self- and
cross-attention). U and V are shared across tasks; (Q, lam) is either one
shared pair or per-task pairs frozen after their task, depending on the
paradigm. V starts at zero, so a freshly added adapter is an exact no-op.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ContractError

N_SLOTS = 8  # q,k,v,out for self-attention then cross-attention

_SHARED_KEY = -1


class CPAdapter:
    def __init__(self, d: int, rank: int, name: str, shared_factors: bool, n_slots: int = N_SLOTS):
        self.d = d
        self.rank = rank
        self.name = name
        self.shared_factors = shared_factors
        self.n_slots = n_slots
        self.U: Parameter | None = None
        self.V: Parameter | None = None
        self.per_task: dict[int, tuple[Parameter, Parameter]] = {}
        self._task_keys: dict[int, int] = {}

    def _init_uv(self, rng: np.random.Generator) -> None:
        self.U = Parameter(rng.standard_normal((self.d, self.rank)) / np.sqrt(self.d), name=f"{self.name}.U")
        self.V = Parameter(np.zeros((self.d, self.rank)), name=f"{self.name}.V")

    def add_task(self, task_id: int, rng: np.random.Generator) -> None:
        if task_id in self._task_keys:
            raise ContractError(f"{self.name}: task {task_id} already registered")
        if self.U is None:
            self._init_uv(rng)
        key = _SHARED_KEY if self.shared_factors else task_id
        if key not in self.per_task:
            q = Parameter(
                rng.standard_normal((self.n_slots, self.rank)) / np.sqrt(self.rank),
                name=f"{self.name}.Q{'' if self.shared_factors else task_id}",
            )
            lam = Parameter(
                rng.standard_normal(self.rank),
                name=f"{self.name}.lam{'' if self.shared_factors else task_id}",
            )
            if not self.shared_factors:
                for q_old, lam_old in self.per_task.values():
                    q_old.frozen = True
                    lam_old.frozen = True
            self.per_task[key] = (q, lam)
        self._task_keys[task_id] = key

    def factors(self, task_id: int) -> tuple[Parameter, Parameter]:
        key = self._task_keys.get(task_id)
        if key is None:
            raise ContractError(f"{self.name}: task {task_id} not registered")
        return self.per_task[key]

    def apply(self, x: Tensor, slot: int, task_id: int) -> Tensor:
        """Delta projection for one slot: ((x V) * (lam . Q[slot])) U^T.

        Equivalent to multiplying by the materialized CP slice without ever
        forming the d x d matrix.
        """
        if not 0 <= slot < self.n_slots:
            raise ContractError(f"{self.name}: slot {slot} out of range")
        q, lam = self.factors(task_id)
        q_row = ag.reshape(ag.take(q.value, np.array([slot])), (self.rank,))
        scale = ag.mul(lam.value, q_row)  # (R,)
        t = ag.matmul(x, self.V.value)  # (..., R)
        return ag.matmul(ag.mul(t, scale), ag.transpose(self.U.value, (1, 0)))

    def delta(self, task_id: int) -> Tensor:
        """Materialize the full (d, d, n_slots) perturbation tensor; used by
        diagnostics and tests, never by the training forward pass."""
        q, lam = self.factors(task_id)
        u = ag.reshape(self.U.value, (self.d, 1, 1, self.rank))
        v = ag.reshape(self.V.value, (1, self.d, 1, self.rank))
        ql = ag.mul(q.value, lam.value)  # (n_slots, R)
        ql = ag.reshape(ql, (1, 1, self.n_slots, self.rank))
        return ag.sum_(ag.mul(ag.mul(u, v), ql), axis=-1)

    def shared_parameters(self) -> dict[str, Parameter]:
        if self.U is None:
            return {}
        return {f"{self.name}.U": self.U, f"{self.name}.V": self.V}

    def named_parameters(self) -> dict[str, Parameter]:
        out = self.shared_parameters()
        for key, (q, lam) in self.per_task.items():
            out[q.name] = q
            out[lam.name] = lam
        return out

    def trainable_for(self, task_id: int) -> list[Parameter]:
        """U, V and this task's (Q, lam); frozen earlier factors excluded."""
        if self.U is None:
            return []
        q, lam = self.factors(task_id)
        params = [self.U, self.V]
        if not q.frozen:
            params.extend([q, lam])
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())
