"""Two-stage training loop, run records and the on-disk run directory.

Stage 1 trains the whole toy model (vision side, host LM and one adapter
per layer) on the mixed suite; there is no pretrained host to start from.
Stage 2 replicates each adapter into a MoLE block and, by default, trains
only the MoLE blocks and the MoVE soft router.

Random streams are split by purpose so variants can be paired: data,
model init, routing noise and the held-out evaluation set each draw from
their own generator seeded by ``(seed, stream)``.
"""

from __future__ import annotations

import copy
import csv
import datetime
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import serialize
from ..config import ExperimentConfig, TrainSection
from ..errors import ConfigError, DivergenceError
from ..optim import AdamW, warmup_cosine
from ..stats import ExpertStats
from ..tensor import Tape
from .model import Evaluation, MomeModel, evaluate
from .tasks import GROUPS, Batch, Suite, make_suite, sample_balanced_batch

DATA, MODEL, NOISE, EVAL = 1, 2, 3, 4


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass
class TrainConfig:
    steps: int
    stage: int = 1
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    lb_coef: float = 0.1
    shards: int = 1

    def validate(self) -> None:
        bad = []
        if self.steps < 0:
            bad.append("steps")
        if self.stage not in (1, 2):
            bad.append("stage")
        if self.warmup < 0 or (self.steps > 0 and self.warmup > self.steps):
            bad.append("warmup")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not 1 <= self.shards <= self.batch_size:
            bad.append("shards")
        if bad:
            raise ConfigError("invalid training config: " + ", ".join(bad), bad)

    @classmethod
    def from_section(cls, t: TrainSection, stage: int) -> "TrainConfig":
        steps = t.steps if stage == 1 else t.stage2_steps
        return cls(steps=steps, stage=stage, batch_size=t.batch_size,
                   lr=t.lr if stage == 1 else t.stage2_lr, warmup=min(t.warmup, steps), min_lr=t.min_lr,
                   beta1=t.beta1, beta2=t.beta2, weight_decay=t.weight_decay, eps=t.eps,
                   lb_coef=t.lb_coef, shards=t.shards)


@dataclass
class RunRecord:
    curves: list[tuple[int, int, float]] = field(default_factory=list)  # (step, group, batch loss)
    totals: list[float] = field(default_factory=list)  # optimised objective per step
    digests: list[bytes] = field(default_factory=list)  # one per training batch
    stats: ExpertStats | None = None
    checkpoints: dict[str, str] = field(default_factory=dict)

    def extend(self, other: "RunRecord") -> None:
        self.curves += other.curves
        self.totals += other.totals
        self.digests += other.digests

    def stream_hash(self) -> str:
        h = hashlib.sha256()
        for d in self.digests:
            h.update(d)
        return h.hexdigest()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["step", "group", "loss"])
        for step, g, loss in self.curves:
            w.writerow([step, GROUPS[g], f"{loss:.17g}"])
        return buf.getvalue()


def _shard_grads(model: MomeModel, batch: Batch, params, lb_coef: float, rng, scale: float):
    with Tape() as tape:
        res = model.forward(batch, training=True, rng=rng)
        loss = model.loss(res, batch.labels, lb_coef)
    grads = tape.backward(loss, grad=np.array(scale), write=False)
    return [grads.get(id(p)) for p in params], float(loss.item()), res.pred.data.copy()


def train(model: MomeModel, suite: Suite, cfg: TrainConfig, data_rng: np.random.Generator,
          noise_rng: np.random.Generator, step_offset: int = 0) -> RunRecord:
    """Optimise ``model`` in place for ``cfg.steps`` balanced batches.

    With ``shards > 1`` each step splits the batch into contiguous shards,
    evaluates them on a thread pool (one tape per thread) and sums the
    shard gradients in shard order. Each shard loss is weighted by its
    share of the batch, so without LB the sum equals the serial gradient.
    Load-balance statistics are computed per shard.
    """
    cfg.validate()
    if cfg.stage == 2 and model.stage != 2:
        raise ConfigError("stage 2 training needs a model converted with to_stage2", ["stage"])
    record = RunRecord()
    if cfg.steps == 0:
        return record
    params = model.trainable()
    opt = AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    bounds = np.linspace(0, cfg.batch_size, cfg.shards + 1).astype(int)
    pool = ThreadPoolExecutor(cfg.shards) if cfg.shards > 1 else None
    try:
        for step in range(cfg.steps):
            batch = sample_balanced_batch(suite, cfg.batch_size, data_rng)
            record.digests.append(batch.digest())
            if pool is None:
                grads, total, pred = _shard_grads(model, batch, params, cfg.lb_coef, noise_rng, 1.0)
            else:
                seeds = noise_rng.integers(0, 2**63, size=cfg.shards)
                jobs = []
                for s in range(cfg.shards):
                    idx = np.arange(bounds[s], bounds[s + 1])
                    jobs.append(pool.submit(_shard_grads, model, batch.subset(idx), params, cfg.lb_coef,
                                            np.random.default_rng(seeds[s]), len(idx) / cfg.batch_size))
                outs = [j.result() for j in jobs]
                grads = []
                for i in range(len(params)):
                    parts = [o[0][i] for o in outs if o[0][i] is not None]
                    grads.append(None if not parts else sum(parts[1:], parts[0]))
                total = sum(o[1] * (bounds[s + 1] - bounds[s]) / cfg.batch_size for s, o in enumerate(outs))
                pred = np.concatenate([o[2] for o in outs])
            sq = (pred - batch.labels) ** 2
            gstep = step_offset + step
            group_loss = {int(g): float(sq[batch.groups == g].mean()) for g in np.unique(batch.groups)}
            finite = np.isfinite(total) and all(g is None or np.isfinite(g).all() for g in grads)
            if not finite:
                raise DivergenceError(f"non-finite loss or gradient at step {gstep} (stage {cfg.stage})",
                                      {"step": gstep, "stage": cfg.stage, "loss": total,
                                       "group_loss": {GROUPS[g]: v for g, v in group_loss.items()}})
            for g, v in sorted(group_loss.items()):
                record.curves.append((gstep, g, v))
            record.totals.append(total)
            opt.lr = warmup_cosine(step, cfg.steps, cfg.warmup, cfg.lr, cfg.min_lr)
            opt.step(grads)
            model.clamp_reference()
    finally:
        if pool is not None:
            pool.shutdown()
    return record


# --- experiment pipeline -------------------------------------------------------------


@dataclass
class Snapshot:
    """One evaluation of the held-out set, tagged with the global step."""

    step: int
    phase: str
    evaluation: Evaluation


class Experiment:
    """Suite, model, random streams and records for one seeded run."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = copy.deepcopy(cfg)
        d = self.cfg.data
        self.suite = make_suite(cfg.seed, d.groups, d.tasks_per_group, d.d_instruction, d.content_dim,
                                d.style_dim, informative=d.informative, style_shift=d.style_shift,
                                pixel_noise=d.pixel_noise, label_noise=d.label_noise)
        self.data_rng = stream(cfg.seed, DATA)
        self.model_rng = stream(cfg.seed, MODEL)
        self.noise_rng = stream(cfg.seed, NOISE)
        self.eval_batch = sample_balanced_batch(self.suite, d.eval_size, stream(cfg.seed, EVAL))
        channels = [e.spec.channels for e in self.suite.encoders]
        self.model = MomeModel(self.cfg.model, channels, d.d_instruction, self.model_rng)
        self.record = RunRecord()
        self.snapshots: list[Snapshot] = []
        self.step = 0

    def snapshot(self, phase: str) -> Snapshot:
        snap = Snapshot(self.step, phase, evaluate(self.model, self.eval_batch))
        self.snapshots.append(snap)
        return snap

    def run_stage(self, stage: int) -> RunRecord:
        tc = TrainConfig.from_section(self.cfg.train, stage)
        rec = train(self.model, self.suite, tc, self.data_rng, self.noise_rng, self.step)
        self.record.extend(rec)
        self.step += tc.steps
        return rec

    def convert(self, use_mole: bool = True) -> None:
        t = self.cfg.train
        self.model.to_stage2(self.model_rng, train_host=t.train_host, use_mole=use_mole)

    def fork(self) -> "Experiment":
        """Independent copy sharing nothing mutable, streams included."""
        return copy.deepcopy(self)

    def run(self, use_mole: bool = True) -> "Experiment":
        self.snapshot("init")
        self.run_stage(1)
        self.snapshot("stage1")
        if self.cfg.train.stage2_steps > 0:
            self.convert(use_mole)
            self.snapshot("stage2_init")
            self.run_stage(2)
            self.snapshot("final")
        self.record.stats = self.expert_stats(self.snapshots[-1])
        return self

    def expert_stats(self, snap: Snapshot) -> ExpertStats:
        ev, b = snap.evaluation, self.eval_batch
        n_layers = len(ev.selected)
        K = self.cfg.model.mole_experts if self.model.stage == 2 else 1
        stats = ExpertStats(len(self.suite.tasks), n_layers, K, ev.importance.shape[1],
                            [t.group for t in self.suite.tasks])
        for layer, sel in enumerate(ev.selected):
            if sel is None:
                continue
            stats.add_routing(layer, self.unit_tasks(sel, layer, ev), sel)
        stats.add_importance(b.task_ids, ev.importance)
        return stats

    def unit_tasks(self, sel: np.ndarray, layer: int, ev: Evaluation) -> np.ndarray:
        """Task id of every routing unit (samples, or tokens for token-level routers)."""
        per = len(sel) // len(self.eval_batch)
        return np.repeat(self.eval_batch.task_ids, per)

    def final_group_loss(self) -> dict[int, float]:
        return self.snapshots[-1].evaluation.group_loss

    # --- persistence ---------------------------------------------------------------

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "curves.csv").write_text(self.record.curves_csv(), newline="")
        tasks = [{"task": t.task_id, "group": GROUPS[t.group], "informative_expert": t.informative_expert}
                 for t in self.suite.tasks]
        (out / "tasks.json").write_text(json.dumps(tasks, indent=2) + "\n")
        with open(out / "routing.jsonl", "w") as fh:
            for snap in self.snapshots:
                ev = snap.evaluation
                for layer, sel in enumerate(ev.selected):
                    if sel is None:
                        continue
                    tids = self.unit_tasks(sel, layer, ev)
                    for u in range(len(sel)):
                        fh.write(json.dumps({"step": snap.step, "task": int(tids[u]), "layer": layer,
                                             "expert": int(sel[u]),
                                             "logits": [float(v) for v in ev.logits[layer][u]]}) + "\n")
        with open(out / "importance.jsonl", "w") as fh:
            b = self.eval_batch
            for snap in self.snapshots:
                ev = snap.evaluation
                for i in range(len(b)):
                    fh.write(json.dumps({"step": snap.step, "phase": snap.phase, "task": int(b.task_ids[i]),
                                         "weights": [float(v) for v in ev.move_weights[i]],
                                         "importance": [float(v) for v in ev.importance[i]]}) + "\n")
        if self.record.stats is not None:
            (out / "stats.json").write_text(self.record.stats.to_json() + "\n")
        ckpt = out / "checkpoint.momt"
        serialize.save(ckpt, self.model.state_dict())
        self.record.checkpoints["final"] = str(ckpt.name)
        b = self.eval_batch
        vision = np.concatenate([np.stack([m.grid.mean(axis=(0, 1)) for m in maps]) for maps in b.maps], axis=1)
        np.savez(out / "features.npz", vision=vision, instruction=b.instructions, group=b.groups,
                 task=b.task_ids)
        summary = {
            "steps": self.step,
            "stream_hash": self.record.stream_hash(),
            "snapshots": [{"step": s.step, "phase": s.phase,
                           "group_loss": {GROUPS[g]: v for g, v in s.evaluation.group_loss.items()},
                           "mean_loss": s.evaluation.mean_loss} for s in self.snapshots],
            "checkpoints": self.record.checkpoints,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        meta = {"written_at": datetime.datetime.now(datetime.timezone.utc).isoformat()}
        (out / "metadata.json").write_text(json.dumps(meta) + "\n")
        return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Experiment:
    exp = Experiment(cfg).run()
    if out_dir is not None:
        exp.write(out_dir)
    return exp
