"""Synthetic multi-task suite: pseudo-encoders, task groups and batches.

Every sample carries one latent per vision expert, split into a content
part (which may drive a label) and a style part whose mean depends on the
task group. Each pseudo-encoder renders its latent onto an H x W x C_e grid
with a fixed random spatial-cosine basis: content rides on high spatial
frequencies that adaptive pooling attenuates, style on low ones. A task's
label depends only on the content latent of its informative expert, so a
model that cannot route to that expert cannot fit the task.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..move import FeatureBatch, FeatureMap

GROUPS = ("General", "REC", "REG", "Document")
GROUP_SHORT = ("Gen", "REC", "REG", "Doc")


@dataclass
class EncoderSpec:
    name: str
    channels: int
    shape: tuple[int, int] | None = None  # fixed grid, or None for variable
    side_range: tuple[int, int] = (3, 10)
    area_band: tuple[int, int] = (20, 60)


DEFAULT_ENCODERS = (
    EncoderSpec("global", 16, (8, 8)),
    EncoderSpec("region", 24, (6, 6)),
    EncoderSpec("document", 12, None),
)
# General -> global, REC -> region, REG -> global, Document -> document
DEFAULT_INFORMATIVE = (0, 1, 0, 2)


class PseudoEncoder:
    """Frozen seeded linear map from a latent vector to an H x W x C_e grid."""

    def __init__(self, expert_id: int, spec: EncoderSpec, content_dim: int, style_dim: int,
                 rng: np.random.Generator):
        self.expert_id = expert_id
        self.spec = spec
        self.content_dim = content_dim
        self.style_dim = style_dim
        n = content_dim + style_dim
        freqs = np.zeros((n, 2))
        for j in range(n):
            if j < content_dim:
                radius, angle = rng.uniform(1.5, 3.0), rng.uniform(0, 2 * np.pi)
            else:
                radius, angle = rng.uniform(0.0, 0.8), rng.uniform(0, 2 * np.pi)
            freqs[j] = radius * np.cos(angle), radius * np.sin(angle)
        self._freqs = freqs
        self._phase = rng.uniform(0, 2 * np.pi, size=n)
        loadings = rng.normal(size=(n, spec.channels))
        self._load = loadings / np.linalg.norm(loadings, axis=1, keepdims=True) * np.sqrt(spec.channels / 4)
        self._basis_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def latent_dim(self) -> int:
        return self.content_dim + self.style_dim

    def basis(self, H: int, W: int) -> np.ndarray:
        """``(H*W, latent_dim)`` spatial pattern of every latent coordinate."""
        key = (H, W)
        if key not in self._basis_cache:
            v = (np.arange(H) + 0.5) / H
            u = (np.arange(W) + 0.5) / W
            uu, vv = np.meshgrid(u, v)  # (H, W)
            arg = 2 * np.pi * (uu.reshape(-1, 1) * self._freqs[:, 0] + vv.reshape(-1, 1) * self._freqs[:, 1])
            self._basis_cache[key] = np.cos(arg + self._phase)
        return self._basis_cache[key]

    def draw_shape(self, rng: np.random.Generator) -> tuple[int, int]:
        if self.spec.shape is not None:
            return self.spec.shape
        lo, hi = self.spec.side_range
        a0, a1 = self.spec.area_band
        while True:
            H, W = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            if a0 <= H * W <= a1:
                return H, W

    def encode(self, latent: np.ndarray, H: int, W: int) -> np.ndarray:
        phi = self.basis(H, W)
        grid = (phi * latent) @ self._load
        return grid.reshape(H, W, self.spec.channels)


@dataclass
class SynthTask:
    task_id: int
    group: int
    informative_expert: int
    readout: np.ndarray  # linear part, (content_dim,)
    curvature: np.ndarray  # quadratic direction, (content_dim,)
    beta: float
    centroid: np.ndarray  # instruction cluster centre, (d_I,)
    spread: float
    size: float = 1.0

    @property
    def group_name(self) -> str:
        return GROUPS[self.group]

    def label(self, content: np.ndarray, noise: float) -> float:
        c = float(content @ self.curvature)
        return float(content @ self.readout + self.beta * (c * c - 1.0) + noise)


@dataclass
class Suite:
    tasks: list[SynthTask]
    encoders: list[PseudoEncoder]
    style_means: np.ndarray  # (groups, experts, style_dim)
    style_scale: float
    pixel_noise: float
    label_noise: float

    @property
    def groups(self) -> list[int]:
        return sorted({t.group for t in self.tasks})

    @property
    def n_experts(self) -> int:
        return len(self.encoders)

    @property
    def d_instruction(self) -> int:
        return len(self.tasks[0].centroid)


def make_tasks(seed: int, groups: int = 4, tasks_per_group: int = 2, d_instruction: int = 16,
               content_dim: int = 4, informative: Sequence[int] = DEFAULT_INFORMATIVE,
               group_radius: float = 4.0, task_offset: float = 0.6, spread: float = 0.25,
               sizes: Sequence[float] | None = None) -> list[SynthTask]:
    """Task suite whose instruction clusters are well separated by group.

    Group centres are orthogonal directions at ``group_radius``, so
    inter-group centre distance is ``group_radius * sqrt(2)``.
    """
    if tasks_per_group < 1:
        raise ConfigError("tasks_per_group must be >= 1", ["tasks_per_group"])
    if not 1 <= groups <= len(GROUPS):
        raise ConfigError(f"groups must be in 1..{len(GROUPS)}", ["groups"])
    if groups > d_instruction:
        raise ConfigError("d_instruction must be >= groups", ["d_instruction"])
    rng = np.random.default_rng([seed, 101])
    basis, _ = np.linalg.qr(rng.normal(size=(d_instruction, d_instruction)))
    tasks = []
    for g in range(groups):
        centre = group_radius * basis[:, g]
        base = rng.normal(size=content_dim)
        curv = rng.normal(size=content_dim)
        curv /= np.linalg.norm(curv)
        for j in range(tasks_per_group):
            a = base / np.linalg.norm(base) + 0.5 * rng.normal(size=content_dim) / np.sqrt(content_dim)
            a = 0.8 * a / np.linalg.norm(a)
            off = rng.normal(size=d_instruction)
            off = task_offset * off / np.linalg.norm(off)
            size = 1.0 if sizes is None else float(sizes[len(tasks)])
            tasks.append(SynthTask(len(tasks), g, int(informative[g]), a, curv, 0.42, centre + off,
                                   spread, size))
    return tasks


def make_suite(seed: int, groups: int = 4, tasks_per_group: int = 2, d_instruction: int = 16,
               content_dim: int = 4, style_dim: int = 3, encoders: Sequence[EncoderSpec] = DEFAULT_ENCODERS,
               informative: Sequence[int] = DEFAULT_INFORMATIVE, style_shift: float = 1.5,
               style_scale: float = 1.0, pixel_noise: float = 0.3, label_noise: float = 0.05) -> Suite:
    if any(not 0 <= e < len(encoders) for e in informative[:groups]):
        raise ConfigError("informative expert index out of range", ["informative"])
    tasks = make_tasks(seed, groups, tasks_per_group, d_instruction, content_dim, informative)
    rng = np.random.default_rng([seed, 202])
    encs = [PseudoEncoder(i, spec, content_dim, style_dim, rng) for i, spec in enumerate(encoders)]
    style_means = style_shift * rng.normal(size=(len(GROUPS), len(encoders), style_dim)) / np.sqrt(style_dim)
    return Suite(tasks, encs, style_means, style_scale, pixel_noise, label_noise)


@dataclass
class Batch:
    latents: list[np.ndarray]  # per expert, (B, latent_dim)
    maps: list[list[FeatureMap]]  # per expert, B maps
    instructions: np.ndarray  # (B, d_I)
    labels: np.ndarray  # (B,)
    task_ids: np.ndarray
    groups: np.ndarray
    _feature_batches: list[FeatureBatch] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def feature_batches(self) -> list[FeatureBatch]:
        if self._feature_batches is None:
            self._feature_batches = [FeatureBatch(m) for m in self.maps]
        return self._feature_batches

    def subset(self, idx: np.ndarray) -> "Batch":
        idx = np.asarray(idx)
        return Batch([z[idx] for z in self.latents], [[m[i] for i in idx] for m in self.maps],
                     self.instructions[idx], self.labels[idx], self.task_ids[idx], self.groups[idx])

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for arr in (self.instructions, self.labels, self.task_ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        for maps in self.maps:
            for m in maps:
                h.update(np.ascontiguousarray(m.grid).tobytes())
        return h.digest()


def assign_tasks(suite: Suite, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, list[SynthTask]]:
    """Equal per-group counts (remainder spread at random); tasks within a group by size."""
    groups = suite.groups
    if batch < len(groups):
        raise ConfigError(f"batch {batch} smaller than {len(groups)} groups", ["batch_size"])
    per = np.full(len(groups), batch // len(groups))
    extra = rng.choice(len(groups), size=batch - per.sum(), replace=False)
    per[extra] += 1
    group_of = np.repeat(np.array(groups), per)
    group_of = group_of[rng.permutation(batch)]
    by_group = {g: [t for t in suite.tasks if t.group == g] for g in groups}
    tasks = []
    for g in group_of:
        members = by_group[g]
        p = np.array([t.size for t in members])
        tasks.append(members[rng.choice(len(members), p=p / p.sum())])
    return group_of, tasks


def sample_balanced_batch(suite: Suite, batch: int, rng: np.random.Generator) -> Batch:
    group_of, tasks = assign_tasks(suite, batch, rng)
    content_dim = suite.encoders[0].content_dim
    latents, maps = [], []
    for enc in suite.encoders:
        content = rng.normal(size=(batch, content_dim))
        style = suite.style_means[group_of, enc.expert_id] + suite.style_scale * \
            rng.normal(size=(batch, enc.style_dim))
        z = np.concatenate([content, style], axis=1)
        latents.append(z)
        ms = []
        for b in range(batch):
            H, W = enc.draw_shape(rng)
            grid = enc.encode(z[b], H, W)
            if suite.pixel_noise:
                grid = grid + suite.pixel_noise * rng.normal(size=grid.shape)
            ms.append(FeatureMap(enc.expert_id, grid))
        maps.append(ms)
    instr = np.stack([t.centroid + t.spread * rng.normal(size=t.centroid.shape) for t in tasks])
    noise = rng.uniform(-suite.label_noise, suite.label_noise, size=batch)
    labels = np.array([t.label(latents[t.informative_expert][b, :content_dim], noise[b])
                       for b, t in enumerate(tasks)])
    return Batch(latents, maps, instr, labels, np.array([t.task_id for t in tasks]), group_of.astype(np.int64))
