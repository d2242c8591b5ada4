"""Pre-LN transformer encoder with a masked-LM head.

Supports block-list duplication (depth warm-starting) and per-block
stochastic skipping with inverted-dropout style 1/p residual scaling:

    x' = x + attn(ln(x)) / p
    x_next = x' + ffn(ln(x')) / p

Dropped blocks contribute the identity. Evaluation always keeps every
block with scale 1.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    seq_len: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# Desk-scale defaults: runs in minutes on a CPU while exercising every
# mechanism. vocab_size 0 means "fill in from the corpus at run time".
DESK_CONFIG = ModelConfig(num_layers=8, d_model=64, n_heads=2, d_ff=256,
                          vocab_size=0, seq_len=64)

_BLOCK_FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                 "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in _BLOCK_FIELDS]

    def copy(self) -> "Block":
        return Block(**{f: T.parameter(getattr(self, f).data.copy()) for f in _BLOCK_FIELDS})


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[Block]
    head: Tensor

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"blocks.{i}"))
        out.append(("head", self.head))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


@dataclass
class LayerPlan:
    """Per-block keep flags and the 1/p residual scale used when kept."""

    keep: np.ndarray   # bool [L]
    scale: np.ndarray  # float [L], >= 1 where kept

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.keep.shape != self.scale.shape:
            raise ValueError("keep/scale length mismatch")
        if np.any(self.scale[self.keep] < 1.0):
            raise ValueError("kept-block scale must be >= 1")

    @classmethod
    def all_keep(cls, n_layers: int) -> "LayerPlan":
        return cls(np.ones(n_layers, dtype=bool), np.ones(n_layers))

    @property
    def active_layers(self) -> int:
        return int(self.keep.sum())


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Scaled-normal weights (std 0.02), unit layernorm gains, zero biases."""
    d, dff, v, s = config.d_model, config.d_ff, config.vocab_size, config.seq_len

    def w(*shape):
        return T.parameter(rng.normal(0.0, INIT_STD, size=shape))

    def zeros(*shape):
        return T.parameter(np.zeros(shape))

    def ones(*shape):
        return T.parameter(np.ones(shape))

    tok_emb = w(v, d)
    pos_emb = w(s, d)
    blocks = []
    for _ in range(config.num_layers):
        blocks.append(Block(
            ln1_g=ones(d), ln1_b=zeros(d),
            wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d),
            wv=w(d, d), bv=zeros(d), wo=w(d, d), bo=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            w1=w(d, dff), b1=zeros(dff), w2=w(dff, d), b2=zeros(d),
        ))
    head = w(d, v)
    return ModelParams(config, tok_emb, pos_emb, blocks, head)


def _attention(tape, x: Tensor, blk: Block, cfg: ModelConfig, batch: int) -> Tensor:
    # x: [B*S, d] -> bidirectional multi-head self-attention -> [B*S, d]
    b, s, h, dh = batch, cfg.seq_len, cfg.n_heads, cfg.d_head

    def heads(w, bias):
        proj = T.add(tape, T.matmul(tape, x, w), bias)
        return T.permute(tape, T.reshape(tape, proj, (b, s, h, dh)), (0, 2, 1, 3))

    q = heads(blk.wq, blk.bq)
    k = heads(blk.wk, blk.bk)
    v = heads(blk.wv, blk.bv)
    scores = T.scale(tape, T.matmul(tape, q, k, transpose_b=True), 1.0 / np.sqrt(dh))
    attn = T.softmax(tape, scores)
    ctx = T.matmul(tape, attn, v)                                  # [B, H, S, dh]
    ctx = T.reshape(tape, T.permute(tape, ctx, (0, 2, 1, 3)), (b * s, h * dh))
    return T.add(tape, T.matmul(tape, ctx, blk.wo), blk.bo)


def _ffn(tape, x: Tensor, blk: Block) -> Tensor:
    hidden = T.gelu(tape, T.add(tape, T.matmul(tape, x, blk.w1), blk.b1))
    return T.add(tape, T.matmul(tape, hidden, blk.w2), blk.b2)


def mlm_logits(tape, params: ModelParams, input_ids: np.ndarray,
               plan: LayerPlan) -> Tensor:
    """Forward pass to vocabulary logits [B, S, V]."""
    cfg = params.config
    input_ids = np.asarray(input_ids)
    b, s = input_ids.shape
    if s != cfg.seq_len:
        raise T.ShapeError(f"input seq len {s} != configured {cfg.seq_len}")
    if len(plan.keep) != params.n_layers:
        raise ValueError(f"layer plan length {len(plan.keep)} != block count {params.n_layers}")

    x = T.add(tape, T.embed_lookup(tape, params.tok_emb, input_ids), params.pos_emb)
    x = T.reshape(tape, x, (b * s, cfg.d_model))
    for blk, keep, sc in zip(params.blocks, plan.keep, plan.scale):
        if not keep:
            continue
        attn_out = _attention(tape, T.layernorm(tape, x, blk.ln1_g, blk.ln1_b), blk, cfg, b)
        x = T.add(tape, x, T.scale(tape, attn_out, sc))
        ffn_out = _ffn(tape, T.layernorm(tape, x, blk.ln2_g, blk.ln2_b), blk)
        x = T.add(tape, x, T.scale(tape, ffn_out, sc))
    logits = T.matmul(tape, x, params.head)
    return T.reshape(tape, logits, (b, s, cfg.vocab_size))


def forward_mlm(tape, params: ModelParams, batch, plan: LayerPlan | None = None):
    """MLM loss on a masked batch.

    Returns (scalar loss tensor, per-example mean losses over each
    sequence's masked positions). Rejects batches with no masked positions.
    """
    if plan is None:
        plan = LayerPlan.all_keep(params.n_layers)
    logits = mlm_logits(tape, params, batch.input_ids, plan)
    return T.masked_cross_entropy(tape, logits, batch.targets, batch.mask)


def stack_model(params: ModelParams, opt_state) -> tuple[ModelParams, "object"]:
    """Double depth by appending a deep copy of the block list (L -> 2L).

    Embeddings and head are untouched. Optimizer moment buffers for block
    parameters are duplicated alongside their copies; the step counter is
    preserved.
    """
    n = len(params.blocks)
    new_blocks = list(params.blocks) + [blk.copy() for blk in params.blocks]
    new_cfg = dataclasses.replace(params.config, num_layers=2 * n)
    new_params = ModelParams(new_cfg, params.tok_emb, params.pos_emb, new_blocks, params.head)

    new_state = opt_state.copy()
    for buf in (new_state.m, new_state.v):
        for i in range(n):
            for f in _BLOCK_FIELDS:
                src = f"blocks.{i}.{f}"
                if src in buf:
                    buf[f"blocks.{i + n}.{f}"] = buf[src].copy()
    return new_params, new_state


# ---------------------------------------------------------------------------
# checkpoints: npz container with a JSON config entry (layout v1)
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    arrays = {name: p.data for name, p in params.named_parameters()}
    meta = {"version": 1, "config": dataclasses.asdict(params.config)}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if meta.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["config"])
        tok_emb = T.parameter(archive["tok_emb"])
        pos_emb = T.parameter(archive["pos_emb"])
        blocks = []
        for i in range(cfg.num_layers):
            blocks.append(Block(**{
                f: T.parameter(archive[f"blocks.{i}.{f}"]) for f in _BLOCK_FIELDS}))
        head = T.parameter(archive["head"])
    return ModelParams(cfg, tok_emb, pos_emb, blocks, head)
