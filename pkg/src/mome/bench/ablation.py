"""Vision-side and language-side ablation grids over paired seeds.

Vision variants train stage 1 only, with MoVE configured per row. Language
variants share one stage-1 run (full MoVE) and fork it before stage 2, so
every row continues from identical weights and identical data streams.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..config import ExperimentConfig
from ..errors import ConfigError
from .tasks import GROUP_SHORT
from .train import Experiment

VISION_VARIANTS = ["single:0", "single:1", "single:2", "avgpool+addition", "adt+addition", "adt+router"]
LANGUAGE_VARIANTS = ["adapter", "mole-it", "mole-t", "mole-i", "mole-i+gs", "mole-i+lb"]
VARIANTS = VISION_VARIANTS + LANGUAGE_VARIANTS

_MOLE = {
    "mole-it": ("IT", "none"),
    "mole-t": ("T", "none"),
    "mole-i": ("I", "none"),
    "mole-i+gs": ("I", "GS"),
    "mole-i+lb": ("I", "LB"),
}


def check_variants(variants) -> list[str]:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; valid: {', '.join(VARIANTS)}", ["variants"])
    if not variants:
        raise ConfigError(f"no variants given; valid: {', '.join(VARIANTS)}", ["variants"])
    return list(variants)


def vision_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    c = copy.deepcopy(cfg)
    m = c.model
    if variant.startswith("single:"):
        m.single_expert, m.transform, m.aggregation = int(variant.split(":")[1]), "adt", "addition"
    else:
        m.transform, m.aggregation = variant.split("+")
    c.train.stage2_steps = 0
    return c


@dataclass
class AblationRow:
    variant: str
    seed: int
    group_loss: dict[int, float]
    stream_hash: str
    expert_fractions: list[np.ndarray]  # per MoLE layer, share of routing units per expert
    experiment: Experiment | None = None

    @property
    def avg(self) -> float:
        return float(np.mean([self.group_loss[g] for g in sorted(self.group_loss)]))

    def fraction_variance(self) -> float:
        """Mean over layers of the variance of expert fractions (0 when no MoLE)."""
        if not self.expert_fractions:
            return 0.0
        return float(np.mean([np.var(f) for f in self.expert_fractions]))


def _row(variant: str, exp: Experiment, keep: bool) -> AblationRow:
    ev = exp.snapshots[-1].evaluation
    K = exp.cfg.model.mole_experts
    fr = [np.bincount(s, minlength=K) / len(s) for s in ev.selected if s is not None]
    return AblationRow(variant, exp.cfg.seed, dict(ev.group_loss), exp.record.stream_hash(), fr,
                       exp if keep else None)


def run_ablation(cfg: ExperimentConfig, variants, seeds=None, keep: bool = False) -> list[AblationRow]:
    """Train every variant for every seed; rows ordered by seed then variant."""
    variants = check_variants(variants)
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        base = copy.deepcopy(cfg)
        base.seed = seed
        shared: Experiment | None = None
        for v in variants:
            if v in VISION_VARIANTS:
                exp = Experiment(vision_config(base, v)).run()
            else:
                if shared is None:
                    shared = Experiment(base)
                    shared.snapshot("init")
                    shared.run_stage(1)
                    shared.snapshot("stage1")
                exp = shared.fork()
                if v != "adapter":
                    exp.model.cfg.mole_variant, exp.model.cfg.mole_balance = _MOLE[v]
                    exp.cfg.model.mole_variant, exp.cfg.model.mole_balance = _MOLE[v]
                exp.convert(use_mole=v != "adapter")
                exp.snapshot("stage2_init")
                exp.run_stage(2)
                exp.snapshot("final")
                exp.record.stats = exp.expert_stats(exp.snapshots[-1])
            rows.append(_row(v, exp, keep))
    return rows


def summarise(rows: list[AblationRow]) -> list[tuple[str, list[float], float]]:
    """Per-variant mean over seeds of each group loss, and their average."""
    order = list(dict.fromkeys(r.variant for r in rows))
    out = []
    for v in order:
        mine = [r for r in rows if r.variant == v]
        groups = sorted(mine[0].group_loss)
        per = [float(np.mean([r.group_loss[g] for r in mine])) for g in groups]
        out.append((v, per, float(np.mean(per))))
    return out


def table_header(n_groups: int = 4) -> list[str]:
    return ["variant"] + list(GROUP_SHORT[:n_groups]) + ["Avg"]
