"""Bidirectional transformer encoder with a tied-projection MLM head.

Configurations mirror the Tiny/Small/Base variants (hidden 128/512/768,
layers 2/4/12, heads 2/8/12, intermediate 512/2048/3072, GELU, dropouts 0.1,
vocab 30522, 512 positions) plus a "toy" preset for desk-scale runs.

Sequences are processed one at a time; batching is a caller-side loop so
gradient accumulation stays an ordered, bitwise-reproducible sum.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numcore as nc
from .numcore import ParamStore, Tensor


class PositionOverflow(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int
    layers: int
    heads: int
    intermediate: int
    vocab_size: int = 30522
    max_positions: int = 512
    hidden_dropout: float = 0.1
    attn_dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        for p in (self.hidden_dropout, self.attn_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout {p} outside [0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)


_PRESETS = {
    "tiny": EncoderConfig(hidden=128, layers=2, heads=2, intermediate=512),
    "small": EncoderConfig(hidden=512, layers=4, heads=8, intermediate=2048),
    "base": EncoderConfig(hidden=768, layers=12, heads=12, intermediate=3072),
    "toy": EncoderConfig(hidden=32, layers=1, heads=2, intermediate=64,
                         vocab_size=64, max_positions=64,
                         hidden_dropout=0.0, attn_dropout=0.0),
}


def preset(name: str, **overrides) -> EncoderConfig:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(_PRESETS)}")
    cfg = _PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg


def _shape_table(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, cfg.hidden),
        "pos_emb": (cfg.max_positions, cfg.hidden),
        "seg_emb": (2, cfg.hidden),
        "emb_ln_g": (cfg.hidden,),
        "emb_ln_b": (cfg.hidden,),
    }
    for i in range(cfg.layers):
        for proj in ("q", "k", "v", "o"):
            shapes[f"l{i}.{proj}_w"] = (cfg.hidden, cfg.hidden)
            shapes[f"l{i}.{proj}_b"] = (cfg.hidden,)
        shapes[f"l{i}.attn_ln_g"] = (cfg.hidden,)
        shapes[f"l{i}.attn_ln_b"] = (cfg.hidden,)
        shapes[f"l{i}.ffn_in_w"] = (cfg.hidden, cfg.intermediate)
        shapes[f"l{i}.ffn_in_b"] = (cfg.intermediate,)
        shapes[f"l{i}.ffn_out_w"] = (cfg.intermediate, cfg.hidden)
        shapes[f"l{i}.ffn_out_b"] = (cfg.hidden,)
        shapes[f"l{i}.ffn_ln_g"] = (cfg.hidden,)
        shapes[f"l{i}.ffn_ln_b"] = (cfg.hidden,)
    # MLM head; the output projection is tied to tok_emb, only a bias is free
    shapes["mlm_w"] = (cfg.hidden, cfg.hidden)
    shapes["mlm_b"] = (cfg.hidden,)
    shapes["mlm_ln_g"] = (cfg.hidden,)
    shapes["mlm_ln_b"] = (cfg.hidden,)
    shapes["mlm_out_b"] = (cfg.vocab_size,)
    return shapes


def count_parameters(cfg: EncoderConfig) -> int:
    """Exact parameter count, with the MLM output projection tied."""
    return sum(int(np.prod(s)) for s in _shape_table(cfg).values())


def init_params(cfg: EncoderConfig, seed: int, dtype=None) -> ParamStore:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype)
    for name, shape in _shape_table(cfg).items():
        if name.endswith("_ln_g") or name.endswith("ln_g"):
            arr = np.ones(shape)
        elif name.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        store.add(name, arr)
    return store


def _self_attention(store: ParamStore, cfg: EncoderConfig, x: Tensor, layer: int,
                    attn_bias: np.ndarray | None, train: bool,
                    rng: np.random.Generator | None) -> Tensor:
    pre = f"l{layer}."
    q = nc.add(nc.matmul(x, store[pre + "q_w"]), store[pre + "q_b"])
    k = nc.add(nc.matmul(x, store[pre + "k_w"]), store[pre + "k_b"])
    v = nc.add(nc.matmul(x, store[pre + "v_w"]), store[pre + "v_b"])
    dh = cfg.hidden // cfg.heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    head_outs = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = nc.slice_cols(q, lo, hi)
        kh = nc.slice_cols(k, lo, hi)
        vh = nc.slice_cols(v, lo, hi)
        scores = nc.scale(nc.matmul(qh, nc.transpose(kh)), inv_sqrt_dh)
        if attn_bias is not None:
            scores = nc.add(scores, Tensor(attn_bias))
        probs = nc.softmax_rows(scores)
        if train and cfg.attn_dropout > 0.0:
            probs = nc.dropout(probs, cfg.attn_dropout, rng)
        head_outs.append(nc.matmul(probs, vh))
    ctx = nc.concat_cols(head_outs) if len(head_outs) > 1 else head_outs[0]
    out = nc.add(nc.matmul(ctx, store[pre + "o_w"]), store[pre + "o_b"])
    if train and cfg.hidden_dropout > 0.0:
        out = nc.dropout(out, cfg.hidden_dropout, rng)
    return nc.layer_norm(nc.add(x, out), store[pre + "attn_ln_g"],
                         store[pre + "attn_ln_b"])


def forward_hidden(store: ParamStore, cfg: EncoderConfig, ids,
                   attn_mask=None, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states (seq_len, hidden) for one token-id sequence.

    attn_mask, when given, marks real positions with 1 and padding with 0;
    padded keys are excluded from every attention distribution.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise nc.ShapeMismatch(f"ids must be 1-D, got shape {ids.shape}")
    if len(ids) > cfg.max_positions:
        raise PositionOverflow(
            f"sequence length {len(ids)} exceeds max_positions {cfg.max_positions}")
    if ids.size and int(ids.max()) >= cfg.vocab_size:
        raise nc.ShapeMismatch(
            f"token id {int(ids.max())} outside vocab of {cfg.vocab_size}")
    if train and (cfg.hidden_dropout > 0 or cfg.attn_dropout > 0) and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    attn_bias = None
    if attn_mask is not None:
        mask = np.asarray(attn_mask, dtype=np.float64)
        attn_bias = np.where(mask > 0, 0.0, -1e9)[None, :]

    x = nc.add(nc.embedding_lookup(store["tok_emb"], ids),
               nc.embedding_lookup(store["pos_emb"], np.arange(len(ids))))
    # NSP is not used; every position sits in segment 0
    x = nc.add(x, nc.embedding_lookup(store["seg_emb"], np.zeros(len(ids), np.int64)))
    x = nc.layer_norm(x, store["emb_ln_g"], store["emb_ln_b"])
    if train and cfg.hidden_dropout > 0.0:
        x = nc.dropout(x, cfg.hidden_dropout, rng)

    for layer in range(cfg.layers):
        x = _self_attention(store, cfg, x, layer, attn_bias, train, rng)
        pre = f"l{layer}."
        ff = nc.gelu(nc.add(nc.matmul(x, store[pre + "ffn_in_w"]),
                            store[pre + "ffn_in_b"]))
        ff = nc.add(nc.matmul(ff, store[pre + "ffn_out_w"]), store[pre + "ffn_out_b"])
        if train and cfg.hidden_dropout > 0.0:
            ff = nc.dropout(ff, cfg.hidden_dropout, rng)
        x = nc.layer_norm(nc.add(x, ff), store[pre + "ffn_ln_g"],
                          store[pre + "ffn_ln_b"])
    return x


def forward_logits(store: ParamStore, cfg: EncoderConfig, ids,
                   attn_mask=None, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Per-position vocabulary logits (seq_len, vocab) for one sequence."""
    x = forward_hidden(store, cfg, ids, attn_mask=attn_mask, train=train, rng=rng)
    t = nc.layer_norm(nc.gelu(nc.add(nc.matmul(x, store["mlm_w"]), store["mlm_b"])),
                      store["mlm_ln_g"], store["mlm_ln_b"])
    return nc.add(nc.matmul(t, nc.transpose(store["tok_emb"])), store["mlm_out_b"])


def forward_mlm(store: ParamStore, cfg: EncoderConfig, batch,
                attn_masks=None, train: bool = False,
                rng: np.random.Generator | None = None) -> list[Tensor]:
    """Per-position log-probabilities for a batch of sequences.

    Returns one (seq_len, vocab) tensor per input sequence; rows sum to one
    in probability space.
    """
    out = []
    for b, ids in enumerate(batch):
        mask = attn_masks[b] if attn_masks is not None else None
        logits = forward_logits(store, cfg, ids, attn_mask=mask, train=train, rng=rng)
        out.append(nc.log_softmax_rows(logits))
    return out


def save_checkpoint(path, store: ParamStore, cfg: EncoderConfig,
                    seed: int | None = None, step: int | None = None):
    store.save(path, meta={"config": cfg.as_dict(), "seed": seed, "step": step})


def load_checkpoint(path) -> tuple[ParamStore, EncoderConfig, dict]:
    store, meta = ParamStore.load(path)
    cfg = EncoderConfig(**meta["config"])
    return store, cfg, meta
