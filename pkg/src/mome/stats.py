"""Routing and importance statistics accumulated per task."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ExpertStats:
    """``counts[task][layer][expert]`` selections and per-task importance means.

    ``task_group`` maps task id to group id so group-level tables can be
    derived without the suite.
    """

    n_tasks: int
    n_layers: int
    n_experts: int
    n_vision: int
    task_group: list[int]
    counts: np.ndarray = field(init=False)
    importance_sum: np.ndarray = field(init=False)
    samples: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.zeros((self.n_tasks, self.n_layers, self.n_experts), dtype=np.int64)
        self.importance_sum = np.zeros((self.n_tasks, self.n_vision))
        self.samples = np.zeros(self.n_tasks, dtype=np.int64)

    def add_routing(self, layer: int, task_ids: np.ndarray, selected: np.ndarray) -> None:
        """One selection per routing unit; ``task_ids`` is aligned with ``selected``."""
        np.add.at(self.counts[:, layer, :], (np.asarray(task_ids), np.asarray(selected)), 1)

    def add_importance(self, task_ids: np.ndarray, importance: np.ndarray) -> None:
        task_ids = np.asarray(task_ids)
        np.add.at(self.importance_sum, task_ids, importance)
        np.add.at(self.samples, task_ids, 1)

    @property
    def empty(self) -> bool:
        return int(self.counts.sum()) == 0 and int(self.samples.sum()) == 0

    def frequencies(self, layer: int) -> np.ndarray:
        """Row-normalised ``(tasks, experts)`` selection frequencies (zero rows stay zero)."""
        c = self.counts[:, layer, :].astype(float)
        tot = c.sum(axis=1, keepdims=True)
        return np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)

    def group_counts(self, layer: int) -> np.ndarray:
        groups = sorted(set(self.task_group))
        out = np.zeros((len(groups), self.n_experts), dtype=np.int64)
        for t, g in enumerate(self.task_group):
            out[groups.index(g)] += self.counts[t, layer]
        return out

    def importance(self) -> np.ndarray:
        """``(tasks, vision experts)`` running mean importance."""
        n = self.samples[:, None].astype(float)
        return np.divide(self.importance_sum, n, out=np.zeros_like(self.importance_sum), where=n > 0)

    def group_importance(self) -> np.ndarray:
        groups = sorted(set(self.task_group))
        out = np.zeros((len(groups), self.n_vision))
        for i, g in enumerate(groups):
            rows = [t for t, tg in enumerate(self.task_group) if tg == g]
            n = self.samples[rows].sum()
            if n:
                out[i] = self.importance_sum[rows].sum(axis=0) / n
        return out

    def to_json(self) -> str:
        return json.dumps({
            "n_tasks": self.n_tasks, "n_layers": self.n_layers, "n_experts": self.n_experts,
            "n_vision": self.n_vision, "task_group": list(self.task_group),
            "counts": self.counts.tolist(), "importance_sum": self.importance_sum.tolist(),
            "samples": self.samples.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExpertStats":
        d = json.loads(text)
        s = cls(d["n_tasks"], d["n_layers"], d["n_experts"], d["n_vision"], d["task_group"])
        s.counts = np.asarray(d["counts"], dtype=np.int64).reshape(s.counts.shape)
        s.importance_sum = np.asarray(d["importance_sum"], dtype=float).reshape(s.importance_sum.shape)
        s.samples = np.asarray(d["samples"], dtype=np.int64)
        return s
