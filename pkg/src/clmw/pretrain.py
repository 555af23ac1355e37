"""Dynamic-masking MLM training loop with gradient accumulation and early stop.

Each optimizer step covers an effective batch of
n_nodes * n_gpu * b_gpu * n_ga sequences, processed as n_ga accumulated
micro-batches (multi-device execution is simulated by the accumulation).
Gradients are summed per sequence in a fixed order and normalized by the
step's total masked-token count, so a step is bitwise independent of how it
was split into micro-batches (64-bit, dropout off).

Mask plans are pure functions of (data seed, epoch, step, sequence index),
which makes masking dynamic across epochs yet fully reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evalstats, numcore as nc
from .datasets import round_half_up
from .encoder import EncoderConfig, forward_logits, forward_mlm, save_checkpoint
from .numcore import AdamW, ParamStore
from .subword import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SubwordModel, encode

_EVAL_STREAM = 982451653  # step tag reserved for validation masking
_DROPOUT_STREAM = 7


class NoEligiblePositions(ValueError):
    pass


class VocabMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


def effective_batch(n_nodes: int, n_gpu: int, b_gpu: int, n_ga: int) -> int:
    """Effective global batch size: nodes x devices x micro-batch x accumulation."""
    for name, v in (("n_nodes", n_nodes), ("n_gpu", n_gpu),
                    ("b_gpu", b_gpu), ("n_ga", n_ga)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return n_nodes * n_gpu * b_gpu * n_ga


@dataclass
class MaskPlan:
    positions: list[int]
    actions: list[str]  # "mask" | "random" | "keep", aligned with positions
    random_ids: list[int]
    rate: float


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_nodes: int = 1
    n_gpu: int = 1
    b_gpu: int = 8
    n_ga: int = 1
    model_seed: int = 1234
    data_seed: int = 1234
    mask_rate: float = 0.15
    mask_action_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    patience: int = 3
    min_delta: float = 1e-4
    divergence_factor: float = 5.0

    def __post_init__(self):
        if abs(sum(self.mask_action_split) - 1.0) > 1e-9:
            raise ValueError("mask_action_split must sum to 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @property
    def b_eff(self) -> int:
        return effective_batch(self.n_nodes, self.n_gpu, self.b_gpu, self.n_ga)

    @property
    def worker_batch(self) -> int:
        return self.n_nodes * self.n_gpu * self.b_gpu


@dataclass
class MetricsRecord:
    epoch: int
    t_loss: float
    v_loss: float
    v_acc: float
    v_wf1: float
    v_pppl: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunManifest:
    config: dict
    encoder_config: dict
    model_seed: int
    data_seed: int
    corpus_hashes: dict
    records: list[MetricsRecord] = field(default_factory=list)
    stop_reason: str = "completed"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["records"] = [r.as_dict() for r in self.records]
        return d


def make_mask(seq_ids, rate: float, seed: int, epoch: int, step: int,
              seq_index: int, vocab_size: int,
              action_split=(0.8, 0.1, 0.1)) -> MaskPlan:
    """Sample masked positions and corruption actions for one sequence.

    Eligible positions exclude CLS/SEP/PAD; the count is round-half-up of
    rate * eligible with a floor of one.
    """
    seq_ids = list(seq_ids)
    eligible = [i for i, t in enumerate(seq_ids)
                if t not in (PAD_ID, CLS_ID, SEP_ID)]
    if not eligible:
        raise NoEligiblePositions("sequence has no maskable tokens")
    count = max(1, round_half_up(rate * len(eligible)))
    count = min(count, len(eligible))
    rng = np.random.default_rng([seed, epoch, step, seq_index])
    picks = rng.choice(len(eligible), size=count, replace=False)
    positions = sorted(eligible[int(p)] for p in picks)
    u = rng.random(count)
    s_mask, s_random = action_split[0], action_split[0] + action_split[1]
    actions = ["mask" if x < s_mask else "random" if x < s_random else "keep"
               for x in u]
    random_ids = [int(t) for t in rng.integers(5, vocab_size, size=count)]
    return MaskPlan(positions=positions, actions=actions,
                    random_ids=random_ids, rate=rate)


def apply_mask(seq_ids, plan: MaskPlan) -> tuple[list[int], list[int]]:
    """Corrupt a sequence per the plan; returns (corrupted_ids, original_ids)."""
    corrupted = list(seq_ids)
    originals = []
    for pos, action, rand_id in zip(plan.positions, plan.actions, plan.random_ids):
        originals.append(corrupted[pos])
        if action == "mask":
            corrupted[pos] = MASK_ID
        elif action == "random":
            corrupted[pos] = rand_id
    return corrupted, originals


def _corpus_hash(lines) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _encode_corpus(tokenizer: SubwordModel, lines) -> list[list[int]]:
    encoded = [encode(tokenizer, line).ids for line in lines if line.strip()]
    if not encoded:
        raise EmptyCorpus("no non-empty lines to train on")
    return encoded


def evaluate(store: ParamStore, enc_cfg: EncoderConfig, encoded_valid,
             cfg: TrainConfig, epoch: int) -> dict:
    """Full validation metric suite under a deterministic per-epoch masking."""
    ref_ids: list[int] = []
    pred_ids: list[int] = []
    ref_logprobs: list[float] = []
    for i, ids in enumerate(encoded_valid):
        plan = make_mask(ids, cfg.mask_rate, cfg.data_seed, epoch,
                         _EVAL_STREAM, i, enc_cfg.vocab_size,
                         cfg.mask_action_split)
        corrupted, originals = apply_mask(ids, plan)
        logp = forward_mlm(store, enc_cfg, [corrupted])[0].data
        rows = logp[plan.positions]
        ref_ids.extend(originals)
        pred_ids.extend(np.argmax(rows, axis=1).tolist())
        ref_logprobs.extend(rows[np.arange(len(originals)), originals].tolist())
    batch = evalstats.MaskedEvalBatch(ref_ids=np.array(ref_ids),
                                      pred_ids=np.array(pred_ids),
                                      ref_logprobs=np.array(ref_logprobs))
    loss = evalstats.masked_loss(batch)
    return {
        "loss": loss,
        "acc": evalstats.masked_accuracy(batch),
        "wf1": evalstats.weighted_f1(batch),
        "pppl": evalstats.pppl(loss),
    }


def train(store: ParamStore, enc_cfg: EncoderConfig, tokenizer: SubwordModel,
          train_lines, valid_lines, cfg: TrainConfig,
          out_dir=None, verbose: bool = False) -> RunManifest:
    """Pretrain with the MLM objective; returns the run manifest.

    Stops early when the monitored validation loss fails to improve by
    min_delta for `patience` epochs; flags the run as diverged on non-finite
    loss or when validation loss exceeds divergence_factor times its
    first-epoch value.
    """
    if len(tokenizer.vocab) != enc_cfg.vocab_size:
        raise VocabMismatch(
            f"tokenizer vocab {len(tokenizer.vocab)} != model vocab {enc_cfg.vocab_size}")
    train_lines = list(train_lines)
    valid_lines = list(valid_lines)
    encoded_train = _encode_corpus(tokenizer, train_lines)
    encoded_valid = _encode_corpus(tokenizer, valid_lines)

    manifest = RunManifest(
        config=asdict(cfg),
        encoder_config=enc_cfg.as_dict(),
        model_seed=cfg.model_seed,
        data_seed=cfg.data_seed,
        corpus_hashes={"train": _corpus_hash(train_lines),
                       "valid": _corpus_hash(valid_lines)},
    )

    optimizer = AdamW(store, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                      eps=cfg.eps, weight_decay=cfg.weight_decay)
    best_v_loss = math.inf
    epochs_since_improve = 0
    first_v_loss = None
    train_dropout = enc_cfg.hidden_dropout > 0 or enc_cfg.attn_dropout > 0

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.data_seed, epoch]).permutation(
            len(encoded_train))
        epoch_nll = 0.0
        epoch_masked = 0
        diverged = False
        for step in range(0, math.ceil(len(order) / cfg.b_eff)):
            chunk = order[step * cfg.b_eff:(step + 1) * cfg.b_eff]
            optimizer.zero_grad()
            step_nll = 0.0
            step_masked = 0
            for pos in range(0, len(chunk), cfg.worker_batch):
                micro = chunk[pos:pos + cfg.worker_batch]
                for ds_idx in micro:
                    ds_idx = int(ds_idx)
                    ids = encoded_train[ds_idx]
                    plan = make_mask(ids, cfg.mask_rate, cfg.data_seed, epoch,
                                     step, ds_idx, enc_cfg.vocab_size,
                                     cfg.mask_action_split)
                    corrupted, originals = apply_mask(ids, plan)
                    rng = np.random.default_rng(
                        [cfg.model_seed, epoch, step, ds_idx, _DROPOUT_STREAM]) \
                        if train_dropout else None
                    with nc.Tape() as tape:
                        logits = forward_logits(store, enc_cfg, corrupted,
                                                train=True, rng=rng)
                        loss = nc.cross_entropy_masked(
                            logits, originals, plan.positions, normalize=False)
                    nc.backward(tape, loss)
                    step_nll += loss.item()
                    step_masked += len(plan.positions)
            if not math.isfinite(step_nll):
                diverged = True
                break
            optimizer.step(grad_scale=1.0 / step_masked)
            epoch_nll += step_nll
            epoch_masked += step_masked

        if diverged:
            manifest.stop_reason = "diverged"
            break
        t_loss = epoch_nll / epoch_masked
        vm = evaluate(store, enc_cfg, encoded_valid, cfg, epoch)
        record = MetricsRecord(epoch=epoch, t_loss=t_loss, v_loss=vm["loss"],
                               v_acc=vm["acc"], v_wf1=vm["wf1"], v_pppl=vm["pppl"])
        manifest.records.append(record)
        if verbose:
            print(f"epoch {epoch}: t_loss={t_loss:.4f} v_loss={vm['loss']:.4f} "
                  f"v_acc={vm['acc']:.4f} v_pppl={vm['pppl']:.4f}")

        if not math.isfinite(vm["loss"]):
            manifest.stop_reason = "diverged"
            break
        if first_v_loss is None:
            first_v_loss = vm["loss"]
        elif vm["loss"] > cfg.divergence_factor * first_v_loss:
            manifest.stop_reason = "diverged"
            break
        if vm["loss"] < best_v_loss - cfg.min_delta:
            best_v_loss = vm["loss"]
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
            if epochs_since_improve >= cfg.patience:
                manifest.stop_reason = "early_stopped"
                break

    if out_dir is not None:
        write_run_dir(out_dir, manifest, store, enc_cfg, cfg)
    return manifest


def write_run_dir(out_dir, manifest: RunManifest, store: ParamStore,
                  enc_cfg: EncoderConfig, cfg: TrainConfig):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "acc", "wf1", "pppl"])
        for r in manifest.records:
            writer.writerow([r.epoch, "train", f"{r.t_loss:.10g}", "", "", ""])
            writer.writerow([r.epoch, "valid", f"{r.v_loss:.10g}",
                             f"{r.v_acc:.10g}", f"{r.v_wf1:.10g}",
                             f"{r.v_pppl:.10g}"])
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), store, enc_cfg,
                    seed=cfg.model_seed, step=len(manifest.records))
