"""Regression fine-tuning: CLS-pooled head, 3-fold CV, seeded hyperparameter
search over the predefined grid, final refit, and held-out test evaluation.

The search runs 15 random trials and then switches to a quantile-based
sequential strategy: completed trials are split into good/bad by mean
validation R^2 and candidates are drawn from (and scored against) the
per-dimension value frequencies of each group. A --random-search style flag
keeps it purely random for ablation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evalstats, numcore as nc
from .encoder import EncoderConfig, forward_hidden
from .numcore import AdamW, ParamStore
from .subword import SubwordModel, encode


class TooFewSamples(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class NonNumericLabels(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


SEARCH_SPACE = {
    "stack_depth": (0, 1, 2, 3, 4, 5),
    "dropout": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "batch_size": (8, 16, 32, 64, 128, 256, 512),
    "learning_rate": (1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3),
    "weight_decay": (0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1),
    "freeze_base_model": (True, False),
}

N_RANDOM_TRIALS = 15
GOOD_QUANTILE = 0.25
N_CANDIDATES = 24


@dataclass(frozen=True)
class HeadConfig:
    stack_depth: int
    dropout: float
    batch_size: int
    learning_rate: float
    weight_decay: float
    freeze_base_model: bool

    def __post_init__(self):
        for name, allowed in SEARCH_SPACE.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)} not in grid {allowed}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CVPlan:
    seed: int
    n: int
    test_indices: np.ndarray
    folds: list[np.ndarray]

    def train_pool(self) -> np.ndarray:
        return np.concatenate(self.folds)


def make_cv_plan(n: int, seed: int) -> CVPlan:
    """Hold out 20% for testing and split the rest into three near-equal folds."""
    if n < 15:
        raise TooFewSamples(f"need at least 15 samples, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(math.floor(0.2 * n + 0.5))
    test = perm[:n_test]
    rest = perm[n_test:]
    base, extra = divmod(len(rest), 3)
    folds = []
    start = 0
    for i in range(3):
        size = base + (1 if i < extra else 0)
        folds.append(rest[start:start + size])
        start += size
    return CVPlan(seed=seed, n=n, test_indices=test, folds=folds)


@dataclass
class TrialResult:
    index: int
    config: HeadConfig
    fold_reports: list[evalstats.RegressionReport]
    mean_r2: float
    rank: int = -1

    def as_dict(self) -> dict:
        return {"index": self.index, "config": self.config.as_dict(),
                "folds": [r.as_dict() for r in self.fold_reports],
                "mean_r2": self.mean_r2, "rank": self.rank}


def rank_trials(trials: list[TrialResult]) -> list[TrialResult]:
    """Total order by mean validation R^2, earlier trial winning ties."""
    ordered = sorted(trials, key=lambda t: (-t.mean_r2, t.index))
    for rank, t in enumerate(ordered):
        t.rank = rank
    return ordered


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _head_shapes(hidden: int, stack_depth: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for d in range(stack_depth):
        shapes[f"h{d}_w"] = (hidden, hidden)
        shapes[f"h{d}_b"] = (hidden,)
    shapes["out_w"] = (hidden, 1)
    shapes["out_b"] = (1,)
    return shapes


class RegressionModel:
    """A pretrained encoder plus a dense regression head on the CLS state."""

    def __init__(self, encoder_store: ParamStore, enc_cfg: EncoderConfig,
                 head_cfg: HeadConfig, seed: int):
        if "tok_emb" not in encoder_store or \
                encoder_store["tok_emb"].data.shape[1] != enc_cfg.hidden:
            raise CheckpointMismatch("encoder parameters do not match the config")
        self.enc_cfg = enc_cfg
        self.head_cfg = head_cfg
        # frozen runs share the encoder read-only; unfrozen runs get a copy
        self.encoder = encoder_store if head_cfg.freeze_base_model \
            else encoder_store.clone()
        rng = np.random.default_rng(seed)
        self.head = ParamStore(dtype=self.encoder.dtype)
        for name, shape in _head_shapes(enc_cfg.hidden, head_cfg.stack_depth).items():
            arr = np.zeros(shape) if name.endswith("_b") \
                else rng.normal(0.0, 0.02, size=shape)
            self.head.add(name, arr)
        self._cls_cache: dict[int, np.ndarray] = {}

    def head_parameter_count(self) -> int:
        return self.head.count()

    def _cls_state(self, key: int, ids, train: bool,
                   rng: np.random.Generator | None):
        if self.head_cfg.freeze_base_model:
            # frozen encoder runs in eval mode, so the CLS state is cacheable
            if key not in self._cls_cache:
                hidden = forward_hidden(self.encoder, self.enc_cfg, ids)
                self._cls_cache[key] = hidden.data[0:1].copy()
            return nc.Tensor(self._cls_cache[key])
        hidden = forward_hidden(self.encoder, self.enc_cfg, ids,
                                train=train, rng=rng)
        return nc.slice_rows(hidden, 0, 1)

    def forward(self, key: int, ids, train: bool = False,
                rng: np.random.Generator | None = None) -> nc.Tensor:
        """Scalar prediction for one encoded sequence."""
        x = self._cls_state(key, ids, train, rng)
        for d in range(self.head_cfg.stack_depth):
            x = nc.gelu(nc.add(nc.matmul(x, self.head[f"h{d}_w"]),
                               self.head[f"h{d}_b"]))
            if train and self.head_cfg.dropout > 0.0:
                x = nc.dropout(x, self.head_cfg.dropout, rng)
        y = nc.add(nc.matmul(x, self.head["out_w"]), self.head["out_b"])
        return nc.sum_all(y)

    def predict(self, keys, encoded) -> np.ndarray:
        return np.array([self.forward(int(k), encoded[int(k)]).item()
                         for k in keys])

    def encoder_grad_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(t.grad ** 2))
                                   for t in self.encoder.tensors())))


def attach_head(encoder_store: ParamStore, enc_cfg: EncoderConfig,
                head_cfg: HeadConfig, seed: int = 0) -> RegressionModel:
    return RegressionModel(encoder_store, enc_cfg, head_cfg, seed)


def _fit(model: RegressionModel, encoded, labels, train_idx, val_idx,
         max_epochs: int, patience: int, seed: int) -> dict:
    """Train the model; returns best-epoch validation metrics (if val given)."""
    cfg = model.head_cfg
    head_opt = AdamW(model.head, lr=cfg.learning_rate,
                     weight_decay=cfg.weight_decay)
    enc_opt = None
    if not cfg.freeze_base_model:
        enc_opt = AdamW(model.encoder, lr=cfg.learning_rate,
                        weight_decay=cfg.weight_decay)
    best = {"val_mse": math.inf, "report": None, "epoch": 0}
    since_improve = 0
    for epoch in range(1, max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(train_idx)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            head_opt.zero_grad()
            if enc_opt is not None:
                enc_opt.zero_grad()
            for i in chunk:
                i = int(i)
                rng = np.random.default_rng([seed, epoch, i])
                with nc.Tape() as tape:
                    pred = model.forward(i, encoded[i], train=True, rng=rng)
                    err = nc.sub(pred, nc.Tensor(np.asarray(float(labels[i]))))
                    loss = nc.mul(err, err)
                nc.backward(tape, loss)
            scale = 1.0 / len(chunk)
            head_opt.step(grad_scale=scale)
            if enc_opt is not None:
                enc_opt.step(grad_scale=scale)
        if val_idx is None or len(val_idx) == 0:
            continue
        preds = model.predict(val_idx, encoded)
        refs = labels[np.asarray(val_idx, dtype=np.int64)]
        mse = float(np.mean((preds - refs) ** 2))
        if mse < best["val_mse"]:
            best = {"val_mse": mse, "epoch": epoch,
                    "report": evalstats.regression_metrics(preds, refs)}
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= patience:
                break
    return best


def _encode_dataset(tokenizer: SubwordModel, smiles) -> list[list[int]]:
    return [encode(tokenizer, s).ids for s in smiles]


def _random_config(rng: np.random.Generator) -> HeadConfig:
    vals = {name: grid[int(rng.integers(len(grid)))]
            for name, grid in SEARCH_SPACE.items()}
    return HeadConfig(**vals)


def _suggest(trial_idx: int, history: list[TrialResult],
             rng: np.random.Generator, random_only: bool) -> HeadConfig:
    if random_only or trial_idx < N_RANDOM_TRIALS or len(history) < 2:
        return _random_config(rng)
    ordered = sorted(history, key=lambda t: (-t.mean_r2, t.index))
    n_good = max(1, int(round(GOOD_QUANTILE * len(ordered))))
    good, bad = ordered[:n_good], ordered[n_good:]

    def weights(group, name, grid):
        counts = {v: 1.0 for v in grid}  # add-one smoothing
        for t in group:
            counts[getattr(t.config, name)] += 1.0
        total = sum(counts.values())
        return {v: c / total for v, c in counts.items()}

    w_good = {name: weights(good, name, grid)
              for name, grid in SEARCH_SPACE.items()}
    w_bad = {name: weights(bad, name, grid)
             for name, grid in SEARCH_SPACE.items()}

    best_cfg = None
    best_score = -math.inf
    for _ in range(N_CANDIDATES):
        vals = {}
        for name, grid in SEARCH_SPACE.items():
            probs = np.array([w_good[name][v] for v in grid])
            vals[name] = grid[int(rng.choice(len(grid), p=probs / probs.sum()))]
        score = sum(math.log(w_good[name][v]) - math.log(w_bad[name][v])
                    for name, v in vals.items())
        if score > best_score:
            best_score = score
            best_cfg = HeadConfig(**vals)
    return best_cfg


def search(encoder_store: ParamStore, enc_cfg: EncoderConfig,
           tokenizer: SubwordModel, smiles, labels, plan: CVPlan,
           trials: int = 50, seed: int = 0, max_epochs: int = 100,
           patience: int = 5, random_only: bool = False) -> list[TrialResult]:
    """Cross-validated hyperparameter search; returns trials ranked by mean R^2."""
    labels = _check_labels(smiles, labels)
    encoded = _encode_dataset(tokenizer, smiles)
    results: list[TrialResult] = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        cfg = _suggest(t, results, rng, random_only)
        reports = []
        for fold in range(3):
            val_idx = plan.folds[fold]
            train_idx = np.concatenate(
                [plan.folds[i] for i in range(3) if i != fold])
            model = RegressionModel(encoder_store, enc_cfg, cfg,
                                    seed=_mix(seed, t, fold))
            best = _fit(model, encoded, labels, train_idx, val_idx,
                        max_epochs, patience, seed=_mix(seed, t, fold, 1))
            reports.append(best["report"])
        mean_r2 = float(np.mean([r.r2 for r in reports]))
        results.append(TrialResult(index=t, config=cfg,
                                   fold_reports=reports, mean_r2=mean_r2))
    return rank_trials(results)


def _mix(*parts: int) -> int:
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p) + 1) % (2 ** 31 - 1)
    return h


def _check_labels(smiles, labels) -> np.ndarray:
    if len(smiles) == 0:
        raise EmptyDataset("dataset has no rows")
    try:
        arr = np.asarray([float(v) for v in labels], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise NonNumericLabels(f"labels must be numeric: {exc}")
    if len(arr) != len(smiles):
        raise EmptyDataset(f"{len(smiles)} molecules but {len(arr)} labels")
    if not np.all(np.isfinite(arr)):
        raise NonNumericLabels("labels contain non-finite values")
    return arr


@dataclass
class FinalReport:
    best: TrialResult
    test: evalstats.RegressionReport
    cv_summary: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"best": self.best.as_dict(), "test": self.test.as_dict(),
                "cv_summary": self.cv_summary}


def format_cell(cv_values, test_value) -> str:
    """SI-table rendering: cross-validation mean +/- s_N with test in parens."""
    arr = np.asarray(cv_values, dtype=np.float64)
    mean = float(np.mean(arr))
    s_n = float(np.std(arr, ddof=1))
    return f"{mean:.3f} ± {s_n:.3f} ({test_value:.3f})"


def refit_and_test(encoder_store: ParamStore, enc_cfg: EncoderConfig,
                   tokenizer: SubwordModel, smiles, labels, plan: CVPlan,
                   best: TrialResult, seed: int = 0,
                   refit_epochs: int = 20) -> FinalReport:
    """Refit the winning config on the full training pool, evaluate on test."""
    labels = _check_labels(smiles, labels)
    encoded = _encode_dataset(tokenizer, smiles)
    model = RegressionModel(encoder_store, enc_cfg, best.config,
                            seed=_mix(seed, 7102))
    _fit(model, encoded, labels, plan.train_pool(), None,
         max_epochs=refit_epochs, patience=refit_epochs, seed=_mix(seed, 7103))
    preds = model.predict(plan.test_indices, encoded)
    refs = labels[plan.test_indices.astype(np.int64)]
    test_report = evalstats.regression_metrics(preds, refs)
    summary = {}
    for metric in ("mae", "rmse", "pearson_r", "r2"):
        cv_vals = [getattr(r, metric) for r in best.fold_reports]
        summary[metric] = format_cell(cv_vals, getattr(test_report, metric))
    return FinalReport(best=best, test=test_report, cv_summary=summary)


def load_dataset_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a 'smiles,label' CSV (header required)."""
    smiles = []
    raw = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "smiles" not in reader.fieldnames \
                or "label" not in reader.fieldnames:
            raise EmptyDataset("dataset CSV needs 'smiles' and 'label' columns")
        for row in reader:
            smiles.append(row["smiles"])
            raw.append(row["label"])
    labels = _check_labels(smiles, raw)
    return smiles, labels
