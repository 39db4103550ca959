"""Toy multimodal model: MoVE vision tokens feeding a small pre-norm host LM.

The host sees the fused visual sequence (after a linear projector) followed
by one instruction token. Each host layer carries an adapter, or a MoLE
block after stage-2 conversion, parallel to its feed-forward sublayer. The
scalar prediction is read from the final state of the instruction token.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..config import ModelConfig
from ..mole import Adapter, HostBlock, MoleBlock, MoleRouting, load_balance_loss, mole_stage2_init
from ..move import MoveOutput, MoVE, expert_importance
from ..nn import LayerNorm, Linear, Module, SelfAttention
from ..tensor import Tensor
from .tasks import Batch


class LMLayer(Module):
    """``x += attn(ln1 x); h = ln2 x; x += ffn(h) + adapter(h)``."""

    def __init__(self, width: int, heads: int, rank: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.ffn = HostBlock(width, 4 * width, rng)
        self.adapter: Adapter | MoleBlock = Adapter(width, rank, rng)

    def host_parameters(self) -> list[Tensor]:
        return self.ln1.parameters() + self.attn.parameters() + self.ln2.parameters() + self.ffn.parameters()

    def __call__(self, x: Tensor, I: Tensor, rng=None, training: bool = False):
        x = ops.add(x, self.attn(self.ln1(x)))
        h = self.ln2(x)
        routing = None
        if isinstance(self.adapter, MoleBlock):
            side, routing = self.adapter(h, I, rng=rng, training=training)
        else:
            side = self.adapter(h)
        return ops.add(x, ops.add(self.ffn(h), side)), routing


@dataclass
class ForwardResult:
    pred: Tensor  # (B,)
    move: MoveOutput
    routings: list[MoleRouting | None]
    aux: list[Tensor] = field(default_factory=list)  # per-layer LB losses


class MomeModel(Module):
    def __init__(self, cfg: ModelConfig, expert_channels, d_instruction: int, rng: np.random.Generator):
        cfg = copy.deepcopy(cfg)
        C = cfg.adt.width
        experts = None if cfg.single_expert is None else [cfg.single_expert]
        self.move = MoVE(expert_channels, cfg.adt, d_instruction, rng, cfg.transform, cfg.aggregation,
                         experts, cfg.router_hidden, cfg.value_bias)
        self.projector = Linear(C, C, rng)
        self.instruction = Linear(d_instruction, C, rng)
        self.layers = [LMLayer(C, cfg.lm_heads, cfg.adapter_rank, rng) for _ in range(cfg.lm_layers)]
        self.norm = LayerNorm(C)
        self.head = Linear(C, 1, rng)
        self._cfg = cfg
        self._d_instruction = d_instruction
        self._stage = 1

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def stage(self) -> int:
        return self._stage

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardResult:
        I = Tensor(batch.instructions)
        mv = self.move(batch.feature_batches(), I)
        vis = self.projector(mv.fused)  # (B, L, C)
        B, L, C = vis.shape
        ins = ops.reshape(self.instruction(I), (B, 1, C))
        x = ops.concat([vis, ins], axis=1)
        routings, aux = [], []
        for layer in self.layers:
            x, routing = layer(x, I, rng=rng, training=training)
            routings.append(routing)
            if routing is not None and layer.adapter.balance == "LB":
                aux.append(load_balance_loss(routing.onehot, routing.probs))
        last = self.norm(ops.select(x, 1, -1))
        pred = ops.reshape(self.head(last), (B,))
        return ForwardResult(pred, mv, routings, aux)

    __call__ = forward

    def loss(self, result: ForwardResult, labels, lb_coef: float = 0.0) -> Tensor:
        loss = ops.mse(result.pred, labels)
        if result.aux and lb_coef:
            lb = ops.scale(ops.add_n(result.aux), lb_coef / len(result.aux))
            loss = ops.add(loss, lb)
        return loss

    def to_stage2(self, rng: np.random.Generator, variant: str | None = None, balance: str | None = None,
                  train_host: bool = False, use_mole: bool = True) -> None:
        """Replicate every layer's adapter into a MoLE block and freeze the host.

        With ``use_mole=False`` the single adapters stay (the plain-adapter
        baseline); trainability is set the same way in both cases. The MoVE
        soft router stays trainable; everything else in the host (ADTs,
        projector, LM sublayers, head) is frozen unless ``train_host``.
        """
        cfg = self._cfg
        if variant is not None:
            cfg.mole_variant = variant
        if balance is not None:
            cfg.mole_balance = balance
        if use_mole:
            for layer in self.layers:
                layer.adapter = mole_stage2_init(layer.adapter, cfg.mole_experts, rng, self._d_instruction,
                                                 cfg.mole_variant, cfg.mole_balance, cfg.gumbel_temperature,
                                                 cfg.it_gate)
        self.set_trainable(train_host)
        for layer in self.layers:
            layer.adapter.set_trainable(True)
        if self.move.router is not None:
            self.move.router.set_trainable(True)
        self._stage = 2

    def clamp_reference(self) -> None:
        self.move.clamp_reference()


@dataclass
class Evaluation:
    group_loss: dict[int, float]
    per_sample_sq: np.ndarray
    move_weights: np.ndarray  # (B, N_active)
    importance: np.ndarray  # (B, N_active)
    selected: list[np.ndarray | None]  # per layer, routing-unit selections
    logits: list[np.ndarray | None]
    levels: list[str | None]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(list(self.group_loss.values())))


def evaluate(model: MomeModel, batch: Batch) -> Evaluation:
    """Forward without a tape; per-group MSE and routing diagnostics."""
    res = model.forward(batch, training=False)
    sq = (res.pred.data - batch.labels) ** 2
    groups = {int(g): float(sq[batch.groups == g].mean()) for g in np.unique(batch.groups)}
    imp = expert_importance(res.move.weights, res.move.per_expert, model.cfg.importance_mode)
    sel = [None if r is None else r.selected.copy() for r in res.routings]
    logits = [None if r is None else r.logits for r in res.routings]
    levels = [None if r is None else r.level for r in res.routings]
    return Evaluation(groups, sq, res.move.weights.weights.data.copy(), imp.values, sel, logits, levels)
