"""Experiment orchestration, cross-run aggregation, and report rendering.

An ExperimentSpec enumerates runs over its axes (seed batteries, tau x nu
noise grids, dataset-size sweeps, tokenizer A/B); every run writes a manifest
keyed by a config hash so re-invocation skips completed work. Aggregation
excludes diverged runs (counting them), summarizes each cell as mean +/- CI,
and renders CSV/JSON/SVG artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace as dc_replace

import numpy as np

from . import evalstats
from .datasets import (bin_size, make_split, materialize_mixed_corpus,
                       noise_counts)
from .encoder import EncoderConfig, init_params, preset
from .pretrain import RunManifest, TrainConfig, train
from .subword import train_bpe, train_wordpiece

KINDS = ("seed_battery", "noise_grid", "size_sweep", "tokenizer_ab",
         "finetune_sweep")

METRIC_FIELDS = {
    "T-Loss": "t_loss",
    "V-Loss": "v_loss",
    "V-Acc": "v_acc",
    "V-wF1": "v_wf1",
    "V-PPPL": "v_pppl",
}

FT_METRIC_FIELDS = {
    "FT-MAE": "mae",
    "FT-RMSE": "rmse",
    "FT-Pearson": "pearson_r",
    "FT-R2": "r2",
}


class MissingCorpus(FileNotFoundError):
    pass


class CorruptManifest(ValueError):
    pass


class EmptyDirectory(ValueError):
    pass


class UnknownFormat(ValueError):
    pass


@dataclass
class ExperimentSpec:
    kind: str
    out_dir: str
    base_corpus: str
    alt_corpus: str | None = None  # aligned alternate standardization
    seeds: list[tuple[int, int]] = field(default_factory=lambda: [(1234, 1234)])
    taus: list[int] = field(default_factory=list)
    nus: list[float] = field(default_factory=list)
    ks: list[int] = field(default_factory=list)
    algorithms: list[str] = field(default_factory=lambda: ["wordpiece"])
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: str | EncoderConfig = "toy"
    vocab_size: int = 256
    min_frequency: int = 2
    train_frac: float = 0.8
    split_seed: int = 97
    mix_seed: int = 53
    k_max: int = 5
    # finetune_sweep axes
    checkpoints: list[str] = field(default_factory=list)
    dataset_csv: str | None = None
    tokenizer_dir: str | None = None
    trials: int = 50

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.kind == "noise_grid" and (not self.taus or not self.nus
                                          or self.alt_corpus is None):
            raise ValueError("noise_grid needs taus, nus, and an alt corpus")
        if self.kind == "size_sweep" and not self.ks:
            raise ValueError("size_sweep needs a list of bin indices")
        if self.kind == "finetune_sweep" and (
                not self.checkpoints or not self.dataset_csv
                or not self.tokenizer_dir):
            raise ValueError(
                "finetune_sweep needs checkpoints, dataset_csv, tokenizer_dir")

    def axis_points(self) -> list[dict]:
        if self.kind == "seed_battery":
            return [{}]
        if self.kind == "noise_grid":
            return [{"tau": t, "nu": v} for t in self.taus for v in self.nus]
        if self.kind == "size_sweep":
            return [{"k": k} for k in self.ks]
        if self.kind == "finetune_sweep":
            return [{"checkpoint": os.path.basename(p)} for p in self.checkpoints]
        return [{"algorithm": a} for a in self.algorithms]


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _run_name(axis: dict, seeds: tuple[int, int]) -> str:
    parts = [f"{k}{axis[k]}" for k in sorted(axis)]
    parts.append(f"s{seeds[0]}-{seeds[1]}")
    return "_".join(parts) or f"s{seeds[0]}-{seeds[1]}"


def _read_lines(path) -> list[str]:
    if not os.path.exists(path):
        raise MissingCorpus(f"corpus not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip()]


def _train_tokenizer(algorithm: str, lines, vocab_size: int, min_frequency: int):
    if algorithm == "bpe":
        return train_bpe(lines, vocab_size, min_frequency)
    if algorithm == "wordpiece":
        return train_wordpiece(lines, vocab_size, min_frequency)
    raise ValueError(f"unknown tokenizer algorithm {algorithm!r}")


def _encoder_config(spec: ExperimentSpec, vocab: int) -> EncoderConfig:
    cfg = preset(spec.encoder) if isinstance(spec.encoder, str) else spec.encoder
    return dc_replace(cfg, vocab_size=vocab)


def run_experiment(spec: ExperimentSpec, verbose: bool = False) -> list[str]:
    """Execute every axis-point x seed run; completed runs are skipped.

    Returns the list of run directories (existing and new).
    """
    if spec.kind == "finetune_sweep":
        return _run_finetune_sweep(spec, verbose)
    base = _read_lines(spec.base_corpus)
    alt = _read_lines(spec.alt_corpus) if spec.alt_corpus else None
    split = make_split(len(base), spec.train_frac, spec.split_seed)
    os.makedirs(spec.out_dir, exist_ok=True)

    run_dirs = []
    for axis in spec.axis_points():
        train_lines, valid_lines = _cell_corpora(spec, axis, base, alt, split)
        algorithm = axis.get("algorithm", spec.algorithms[0])
        tok_source = train_lines if alt is None else base + alt
        tokenizer = _train_tokenizer(algorithm, tok_source, spec.vocab_size,
                                     spec.min_frequency)
        enc_cfg = _encoder_config(spec, len(tokenizer.vocab))
        for model_seed, data_seed in spec.seeds:
            seeds = (int(model_seed), int(data_seed))
            run_dir = os.path.join(spec.out_dir, _run_name(axis, seeds))
            cfg = dc_replace(spec.train, model_seed=seeds[0], data_seed=seeds[1])
            payload = {"kind": spec.kind, "axis": axis, "seeds": seeds,
                       "train": asdict(cfg), "encoder": enc_cfg.as_dict()}
            digest = _config_hash(payload)
            if _is_complete(run_dir, digest):
                run_dirs.append(run_dir)
                continue
            if verbose:
                print(f"running {run_dir}")
            store = init_params(enc_cfg, seed=seeds[0])
            manifest = train(store, enc_cfg, tokenizer, train_lines,
                             valid_lines, cfg, out_dir=run_dir, verbose=verbose)
            _write_axis(run_dir, spec.kind, axis, seeds, digest,
                        manifest.stop_reason)
            run_dirs.append(run_dir)
    return run_dirs


def _cell_corpora(spec: ExperimentSpec, axis: dict, base, alt, split):
    train_idx = split.train_indices
    valid_idx = split.valid_indices
    if spec.kind == "noise_grid":
        n_train, n_valid = len(train_idx), len(valid_idx)
        a = max(1, n_train // 2 ** spec.k_max)
        grid = noise_counts(axis["tau"], axis["nu"], n_train, n_valid,
                            a, spec.k_max)
        cell_dir = os.path.join(spec.out_dir, "cells",
                                f"tau{axis['tau']}_nu{axis['nu']}")
        os.makedirs(cell_dir, exist_ok=True)
        out_train = os.path.join(cell_dir, "train.txt")
        out_valid = os.path.join(cell_dir, "valid.txt")
        materialize_mixed_corpus(spec.base_corpus, spec.alt_corpus, grid,
                                 split, spec.mix_seed, out_train, out_valid)
        return _read_lines(out_train), _read_lines(out_valid)
    train_lines = [base[int(i)] for i in train_idx]
    valid_lines = [base[int(i)] for i in valid_idx]
    if spec.kind == "size_sweep":
        k_max = max(spec.ks)
        a = max(1, len(train_lines) // 2 ** k_max)
        n = bin_size(axis["k"], a, k_max, train_total=len(train_lines))
        train_lines = train_lines[:n]
    return train_lines, valid_lines


def _run_finetune_sweep(spec: ExperimentSpec, verbose: bool) -> list[str]:
    from .encoder import load_checkpoint
    from .finetune import load_dataset_csv, make_cv_plan, refit_and_test, search
    from .subword import load_model

    tokenizer = load_model(spec.tokenizer_dir)
    smiles, labels = load_dataset_csv(spec.dataset_csv)
    plan = make_cv_plan(len(smiles), spec.split_seed)
    os.makedirs(spec.out_dir, exist_ok=True)
    run_dirs = []
    for path, axis in zip(spec.checkpoints, spec.axis_points()):
        store, enc_cfg, _ = load_checkpoint(path)
        for model_seed, data_seed in spec.seeds:
            seeds = (int(model_seed), int(data_seed))
            run_dir = os.path.join(spec.out_dir, _run_name(axis, seeds))
            payload = {"kind": spec.kind, "axis": axis, "seeds": seeds,
                       "trials": spec.trials, "dataset": spec.dataset_csv}
            digest = _config_hash(payload)
            if _is_complete(run_dir, digest):
                run_dirs.append(run_dir)
                continue
            if verbose:
                print(f"running {run_dir}")
            ranked = search(store, enc_cfg, tokenizer, smiles, labels, plan,
                            trials=spec.trials, seed=seeds[0])
            final = refit_and_test(store, enc_cfg, tokenizer, smiles, labels,
                                   plan, ranked[0], seed=seeds[0])
            os.makedirs(run_dir, exist_ok=True)
            with open(os.path.join(run_dir, "finetune.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(final.as_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            _write_axis(run_dir, spec.kind, axis, seeds, digest, "completed")
            run_dirs.append(run_dir)
    return run_dirs


def _axis_path(run_dir) -> str:
    return os.path.join(run_dir, "axis.json")


def _write_axis(run_dir, kind, axis, seeds, digest, stop_reason):
    with open(_axis_path(run_dir), "w", encoding="utf-8") as fh:
        json.dump({"kind": kind, "axis": axis, "seeds": list(seeds),
                   "config_hash": digest, "stop_reason": stop_reason},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def _is_complete(run_dir, digest) -> bool:
    path = _axis_path(run_dir)
    if not os.path.exists(path):
        return False
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"unreadable axis manifest {path}: {exc}")
    return data.get("config_hash") == digest


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class CellStat:
    n: int
    mean: float
    s_n: float
    ci_half: float  # NaN when n < 2
    diverged: int

    def as_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "s_N": self.s_n,
                "ci_half": self.ci_half, "diverged": self.diverged}


@dataclass
class HeatmapSheet:
    metric: str
    row_axis: str
    col_axis: str
    rows: list
    cols: list
    cells: dict[tuple, CellStat]


def _load_runs(root) -> list[dict]:
    runs = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "axis.json" not in files:
            continue
        payload_name = "manifest.json" if "manifest.json" in files else \
            "finetune.json" if "finetune.json" in files else None
        if payload_name is None:
            continue
        try:
            with open(os.path.join(dirpath, "axis.json"), encoding="utf-8") as fh:
                axis = json.load(fh)
            with open(os.path.join(dirpath, payload_name), encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptManifest(f"unreadable manifest under {dirpath}: {exc}")
        runs.append({"dir": dirpath, "axis": axis,
                     ("finetune" if payload_name == "finetune.json"
                      else "manifest"): payload})
    if not runs:
        raise EmptyDirectory(f"no completed runs under {root}")
    return runs


def _cell_stat(values: list[float], diverged: int) -> CellStat:
    if not values:
        return CellStat(n=0, mean=math.nan, s_n=math.nan, ci_half=math.nan,
                        diverged=diverged)
    if len(values) == 1:
        # CI undefined for a single surviving run (NaN policy)
        return CellStat(n=1, mean=values[0], s_n=math.nan, ci_half=math.nan,
                        diverged=diverged)
    s = evalstats.summarize(values)
    return CellStat(n=s.n, mean=s.mean, s_n=s.s_n, ci_half=s.ci_half,
                    diverged=diverged)


def aggregate(root, metric: str) -> HeatmapSheet:
    """Summarize the final-epoch metric per cell, excluding diverged runs."""
    if metric not in METRIC_FIELDS and metric not in FT_METRIC_FIELDS:
        raise KeyError(f"unknown metric {metric!r}; have "
                       f"{sorted(METRIC_FIELDS) + sorted(FT_METRIC_FIELDS)}")
    runs = _load_runs(root)
    kind = runs[0]["axis"]["kind"]
    grouped: dict[tuple, dict] = {}
    for run in runs:
        axis = run["axis"]["axis"]
        if kind == "noise_grid":
            key = (axis["tau"], axis["nu"])
        elif kind == "size_sweep":
            key = (axis["k"],)
        elif kind == "tokenizer_ab":
            key = (axis["algorithm"],)
        elif kind == "finetune_sweep":
            key = (axis["checkpoint"],)
        else:
            key = ("all",)
        cell = grouped.setdefault(key, {"values": [], "diverged": 0})
        if "finetune" in run:
            cell["values"].append(
                float(run["finetune"]["test"][FT_METRIC_FIELDS[metric]]))
            continue
        manifest = run["manifest"]
        records = manifest.get("records", [])
        if manifest.get("stop_reason") == "diverged" or not records:
            cell["diverged"] += 1
            continue
        cell["values"].append(float(records[-1][METRIC_FIELDS[metric]]))

    cells = {key: _cell_stat(v["values"], v["diverged"])
             for key, v in grouped.items()}
    if kind == "noise_grid":
        rows = sorted({k[0] for k in cells})
        cols = sorted({k[1] for k in cells})
        return HeatmapSheet(metric=metric, row_axis="tau", col_axis="nu",
                            rows=rows, cols=cols, cells=cells)
    rows = sorted({k[0] for k in cells}, key=str)
    return HeatmapSheet(metric=metric, row_axis=kind, col_axis="",
                        rows=rows, cols=[None], cells=cells)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.6g}"


def _sheet_rows(sheet: HeatmapSheet):
    for key in sorted(sheet.cells, key=str):
        stat = sheet.cells[key]
        axis_vals = list(key) + [""] * (2 - len(key))
        yield axis_vals, stat


def render(sheet: HeatmapSheet, fmt: str, path) -> str:
    """Write the aggregate as csv, json, or an svg heatmap; returns the path."""
    if fmt == "csv":
        lines = [",".join([sheet.row_axis or "axis", sheet.col_axis or "",
                           "metric", "n", "mean", "s_N", "ci_half", "diverged"])]
        for axis_vals, stat in _sheet_rows(sheet):
            lines.append(",".join([str(axis_vals[0]), str(axis_vals[1]),
                                   sheet.metric, str(stat.n), _fmt(stat.mean),
                                   _fmt(stat.s_n), _fmt(stat.ci_half),
                                   str(stat.diverged)]))
        content = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = {
            "metric": sheet.metric,
            "row_axis": sheet.row_axis,
            "col_axis": sheet.col_axis,
            "cells": {"/".join(str(k) for k in key): stat.as_dict()
                      for key, stat in sheet.cells.items()},
        }
        content = json.dumps(payload, indent=2, sort_keys=True,
                             allow_nan=True) + "\n"
    elif fmt == "svg":
        content = _render_svg(sheet)
    else:
        raise UnknownFormat(f"unknown format {fmt!r}; use csv, json, or svg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)
    return str(path)


def _render_svg(sheet: HeatmapSheet) -> str:
    cell_w, cell_h, margin = 110, 56, 70
    rows, cols = sheet.rows, sheet.cols
    width = margin * 2 + cell_w * len(cols)
    height = margin * 2 + cell_h * len(rows) + 30
    means = [s.mean for s in sheet.cells.values()
             if s.n >= 1 and not math.isnan(s.mean)]
    lo, hi = (min(means), max(means)) if means else (0.0, 1.0)
    span = (hi - lo) or 1.0

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    parts.append(f'<text x="{margin}" y="20">{sheet.metric} by '
                 f'{sheet.row_axis}/{sheet.col_axis or "-"} '
                 f'(scale {lo:.4g}..{hi:.4g})</text>')
    for r, row in enumerate(rows):
        y = margin + r * cell_h
        parts.append(f'<text x="10" y="{y + cell_h / 2:.0f}">'
                     f'{sheet.row_axis}={row}</text>')
        for c, col in enumerate(cols):
            x = margin + c * cell_w
            key = (row,) if col is None else (row, col)
            stat = sheet.cells.get(key)
            if r == 0 and col is not None:
                parts.append(f'<text x="{x + 4}" y="{margin - 8}">'
                             f'{sheet.col_axis}={col}</text>')
            if stat is None:
                continue
            if stat.n == 0 or math.isnan(stat.mean):
                fill = "#ffffff"
                label = "empty"
            else:
                frac = (stat.mean - lo) / span
                shade = int(235 - 110 * frac)
                fill = f"rgb({shade},{shade},255)"
                label = f"{stat.mean:.4f}"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell_w - 2}" '
                         f'height="{cell_h - 2}" fill="{fill}" stroke="#555"/>')
            parts.append(f'<text x="{x + 4}" y="{y + 20}">{label}</text>')
            badge = []
            if stat.n == 1:
                badge.append("n=1")
            elif stat.n >= 2:
                badge.append(f"±{stat.ci_half:.4f}")
            if stat.diverged:
                badge.append("†" * stat.diverged)
            if badge:
                parts.append(f'<text x="{x + 4}" y="{y + 38}">'
                             f'{" ".join(badge)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
