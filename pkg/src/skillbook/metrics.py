"""Lifelong-learning metrics over the recorded success tensor.

The harness records c[i, j, e]: success on task j evaluated after training
task i for e epochs, for j <= i at each scheduled eval point. Early stopping
may truncate a diagonal curve; the best recorded value then clamps every
later point. From the tensor: c*_i is the best diagonal success of task i,
e*_i the earliest epoch achieving it, and cross-task entries are read at the
training task's e*.

FWT averages the clamped diagonal curves (adaptation speed), NBT averages the
drop from c*_k to later re-evaluations (forgetting), AUC blends both into an
overall area-under-success score.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class SuccessRecord:
    n_tasks: int
    eval_points: list[int]  # epochs, ascending, starting at 0
    diag_raw: np.ndarray  # (K, E) NaN after an early-stopping halt
    offdiag: np.ndarray  # (K, K, E): [i, j, e] for j < i, NaN elsewhere/unevaluated

    def __post_init__(self):
        K, E = self.n_tasks, len(self.eval_points)
        self.diag_raw = np.asarray(self.diag_raw, dtype=float)
        self.offdiag = np.asarray(self.offdiag, dtype=float)
        if self.diag_raw.shape != (K, E):
            raise DataError(f"diag_raw shape {self.diag_raw.shape} != ({K}, {E})")
        if self.offdiag.shape != (K, K, E):
            raise DataError(f"offdiag shape {self.offdiag.shape} != ({K}, {K}, {E})")
        if sorted(self.eval_points) != list(self.eval_points):
            raise DataError("eval_points must be ascending")
        finite_vals = np.concatenate([self.diag_raw.reshape(-1), self.offdiag.reshape(-1)])
        finite_vals = finite_vals[~np.isnan(finite_vals)]
        if finite_vals.size and (finite_vals.min() < 0.0 or finite_vals.max() > 1.0):
            raise DataError("success rates must lie in [0, 1]")

    # -- derived quantities --------------------------------------------------

    def best_diag(self, k: int) -> float:
        curve = self.diag_raw[k]
        if np.all(np.isnan(curve)):
            raise DataError(f"task {k}: diagonal curve has no evaluated points")
        return float(np.nanmax(curve))

    def e_star_index(self, k: int) -> int:
        """Index into eval_points of the earliest diagonal maximum."""
        curve = self.diag_raw[k]
        best = self.best_diag(k)
        for idx, v in enumerate(curve):
            if not math.isnan(v) and v == best:
                return idx
        raise DataError(f"task {k}: no argmax found")  # unreachable after best_diag

    def clamped_diag(self) -> np.ndarray:
        """Diagonal curves with every point at or after e* set to the best
        value; also fills points truncated by early stopping."""
        K, E = self.n_tasks, len(self.eval_points)
        out = np.empty((K, E))
        for k in range(K):
            best = self.best_diag(k)
            star = self.e_star_index(k)
            for e in range(E):
                if e >= star:
                    out[k, e] = best
                else:
                    v = self.diag_raw[k, e]
                    if math.isnan(v):
                        raise DataError(f"task {k}: missing diagonal at eval point index {e} < e*")
                    out[k, e] = v
        return out

    def cross(self, i: int, j: int) -> float:
        """c_{i,j}: success on earlier task j after training task i, read at
        task i's e*."""
        if not 0 <= j < i < self.n_tasks:
            raise DataError(f"cross({i}, {j}) needs j < i")
        v = self.offdiag[i, j, self.e_star_index(i)]
        if math.isnan(v):
            raise DataError(f"missing cross entry: trained task {i}, eval task {j}, e*={self.eval_points[self.e_star_index(i)]}")
        return float(v)

    def validate(self) -> None:
        """Raise DataError naming every entry the metrics need but lack."""
        missing = []
        for k in range(self.n_tasks):
            try:
                star = self.e_star_index(k)
            except DataError:
                missing.append(f"diag[{k}]")
                continue
            for e in range(star):
                if math.isnan(self.diag_raw[k, e]):
                    missing.append(f"diag[{k}] @ index {e}")
            for j in range(k):
                if math.isnan(self.offdiag[k, j, star]):
                    missing.append(f"cross[{k},{j}] @ e*")
        if missing:
            raise DataError("incomplete success record: " + ", ".join(missing))

    # -- serialization ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        def pack(a: np.ndarray):
            return [[None if math.isnan(v) else v for v in row] for row in a.reshape(a.shape[0], -1).tolist()]

        doc = {
            "n_tasks": self.n_tasks,
            "eval_points": list(self.eval_points),
            "diag_raw": pack(self.diag_raw),
            "offdiag_shape": list(self.offdiag.shape),
            "offdiag": pack(self.offdiag),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "SuccessRecord":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt success record: {exc}") from exc

        def unpack(rows, shape):
            flat = [math.nan if v is None else float(v) for row in rows for v in row]
            return np.array(flat).reshape(shape)

        K = int(doc["n_tasks"])
        E = len(doc["eval_points"])
        return cls(
            n_tasks=K,
            eval_points=[int(e) for e in doc["eval_points"]],
            diag_raw=unpack(doc["diag_raw"], (K, E)),
            offdiag=unpack(doc["offdiag"], tuple(doc["offdiag_shape"])),
        )


# ---------------------------------------------------------------------------
# metrics


def fwt_per_task(record: SuccessRecord) -> np.ndarray:
    return record.clamped_diag().mean(axis=1)


def fwt(record: SuccessRecord) -> float:
    return float(fwt_per_task(record).mean())


def nbt(record: SuccessRecord) -> float:
    """Mean drop from each task's best to its later re-evaluations. The final
    task has no later evaluations; its term is zero by convention."""
    K = record.n_tasks
    total = 0.0
    for k in range(K - 1):
        drop = 0.0
        for q in range(k + 1, K):
            drop += record.best_diag(k) - record.cross(q, k)
        total += drop / (K * (K - 1 - k))
    return float(total)


def auc(record: SuccessRecord) -> float:
    K = record.n_tasks
    per_task = fwt_per_task(record)
    total = 0.0
    for k in range(K):
        later = sum(record.cross(q, k) for q in range(k + 1, K))
        total += (per_task[k] + later) / (K * (K - k))
    return float(total)


@dataclass
class MetricsReport:
    fwt: float
    nbt: float
    auc: float
    per_task_fwt: list[float]

    def __post_init__(self):
        if not (math.isnan(self.fwt) or 0.0 <= self.fwt <= 1.0):
            raise DataError(f"fwt {self.fwt} outside [0, 1]")
        if not (math.isnan(self.auc) or 0.0 <= self.auc <= 1.0):
            raise DataError(f"auc {self.auc} outside [0, 1]")
        if not (math.isnan(self.nbt) or -1.0 <= self.nbt <= 1.0):
            raise DataError(f"nbt {self.nbt} outside [-1, 1]")


def compute_report(record: SuccessRecord) -> MetricsReport:
    record.validate()
    return MetricsReport(
        fwt=fwt(record),
        nbt=nbt(record),
        auc=auc(record),
        per_task_fwt=[float(v) for v in fwt_per_task(record)],
    )


# ---------------------------------------------------------------------------
# skill-usage analytics


def skill_usage(
    events: list[tuple[int, np.ndarray]], subset_bounds: list[tuple[int, int, int]]
) -> dict[int, list[tuple[int, int, int]]]:
    """Aggregate selection events into per-evaluation-task usage tables.

    Each event is (eval_task, selected row ids, possibly repeated across
    windows). Returns eval_task -> [(row, source_task, count)] ranked by
    count descending, row ascending.
    """

    def source_of(row: int) -> int:
        for task_id, start, end in subset_bounds:
            if start <= row < end:
                return task_id
        return -1

    by_task: dict[int, Counter] = {}
    for eval_task, rows in events:
        by_task.setdefault(eval_task, Counter()).update(np.asarray(rows).reshape(-1).tolist())
    out = {}
    for eval_task, counter in sorted(by_task.items()):
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        out[eval_task] = [(int(row), source_of(int(row)), int(n)) for row, n in ranked]
    return out


# ---------------------------------------------------------------------------
# report files


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_report(
    record: SuccessRecord,
    usage: dict[int, list[tuple[int, int, int]]],
    out_dir: str | Path,
    meta: dict | None = None,
) -> list[Path]:
    """Write the per-run report files: a one-row metrics summary, the
    diagonal curve series, the full success-over-time table, and the
    skill-usage ranking. All delimited text with a header row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = meta or {}
    report = compute_report(record)
    written = []

    path = out_dir / "metrics.csv"
    with open(path, "w") as fh:
        fh.write("paradigm,suite,seed,fwt,nbt,auc\n")
        fh.write(
            f"{meta.get('paradigm', '?')},{meta.get('suite', '?')},{meta.get('seed', '?')},"
            f"{_fmt(report.fwt)},{_fmt(report.nbt)},{_fmt(report.auc)}\n"
        )
    written.append(path)

    path = out_dir / "curves.csv"
    clamped = record.clamped_diag()
    with open(path, "w") as fh:
        fh.write("task,epoch,success_raw,success_clamped\n")
        for k in range(record.n_tasks):
            for idx, epoch in enumerate(record.eval_points):
                raw = record.diag_raw[k, idx]
                fh.write(f"{k},{epoch},{'' if math.isnan(raw) else _fmt(raw)},{_fmt(clamped[k, idx])}\n")
    written.append(path)

    path = out_dir / "success_over_time.csv"
    with open(path, "w") as fh:
        fh.write("trained_task,eval_task,epoch,success\n")
        for i in range(record.n_tasks):
            for idx, epoch in enumerate(record.eval_points):
                if not math.isnan(record.diag_raw[i, idx]):
                    fh.write(f"{i},{i},{epoch},{_fmt(record.diag_raw[i, idx])}\n")
                for j in range(i):
                    v = record.offdiag[i, j, idx]
                    if not math.isnan(v):
                        fh.write(f"{i},{j},{epoch},{_fmt(v)}\n")
    written.append(path)

    path = out_dir / "skill_usage.csv"
    with open(path, "w") as fh:
        fh.write("eval_task,skill_row,source_task,count\n")
        for eval_task in sorted(usage):
            for row, source, count in usage[eval_task]:
                fh.write(f"{eval_task},{row},{source},{count}\n")
    written.append(path)
    return written
