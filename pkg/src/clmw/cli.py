"""Command-line interface.

Verbs: standardize, inject-noise, bin-plan, train-tokenizer, encode,
pretrain, evaluate, finetune, stats, experiment, report. Global flags
--seed/--threads/--float32 apply to every verb; CLMW_RUN_DIR overrides the
output root for relative paths. Exit codes: 0 ok, 2 validation error,
3 experiment where every run diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ALL_DIVERGED = 3


def _resolve_out(path: str) -> str:
    root = os.environ.get("CLMW_RUN_DIR")
    if root and not os.path.isabs(path):
        os.makedirs(root, exist_ok=True)
        return os.path.join(root, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clmw",
                                description="chemical language model workbench")
    p.add_argument("--seed", type=int, default=1234, help="global default seed")
    p.add_argument("--threads", type=int, default=None,
                   help="cap numeric library threads")
    p.add_argument("--float32", action="store_true",
                   help="use 32-bit parameters and activations")
    sub = p.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("standardize", help="standardize a SMILES corpus")
    sp.add_argument("--protocol", choices=["pubchem", "chembl"], required=True)
    sp.add_argument("--salts", help="salt list file (one SMILES per line)")
    sp.add_argument("input")
    sp.add_argument("output")

    sp = sub.add_parser("inject-noise", help="mix two aligned corpora")
    sp.add_argument("--tau", type=int, required=True)
    sp.add_argument("--nu", type=float, required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--alt", required=True)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-valid", required=True)
    sp.add_argument("--train-frac", type=float, default=0.8)
    sp.add_argument("--a", type=int, default=None,
                    help="first-bin size (default: n_train / 2^kmax)")
    sp.add_argument("--kmax", type=int, default=5)
    sp.add_argument("--contiguous", action="store_true")
    sp.add_argument("--manifest", help="write a JSON manifest here")

    sp = sub.add_parser("bin-plan", help="print exponential bin sizes")
    sp.add_argument("--a", type=int, required=True)
    sp.add_argument("--kmax", type=int, default=5)
    sp.add_argument("--train-total", type=int, default=None)

    sp = sub.add_parser("train-tokenizer", help="train a subword tokenizer")
    sp.add_argument("--algorithm", choices=["wordpiece", "bpe"],
                    default="wordpiece")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab-size", type=int, default=30522)
    sp.add_argument("--min-frequency", type=int, default=2)

    sp = sub.add_parser("encode", help="encode a corpus to token ids")
    sp.add_argument("--model", required=True, help="tokenizer directory")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)

    sp = sub.add_parser("pretrain", help="masked-LM pretraining")
    sp.add_argument("--config", required=True, help="JSON train/encoder config")
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("evaluate", help="metric suite on a corpus")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--mask-rate", type=float, default=0.15)

    sp = sub.add_parser("finetune", help="CV hyperparameter search + refit")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--dataset", required=True, help="CSV with smiles,label")
    sp.add_argument("--out", required=True)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--max-epochs", type=int, default=100)
    sp.add_argument("--random-search", action="store_true")
    sp.add_argument("--log10-labels", action="store_true")

    sp = sub.add_parser("stats", help="summary statistics over run CSVs")
    stats_sub = sp.add_subparsers(dest="stats_verb", required=True)
    ss = stats_sub.add_parser("summarize")
    ss.add_argument("--col", required=True,
                    help="metric column, e.g. V-Loss or T-Loss")
    ss.add_argument("files", nargs="+")

    sp = sub.add_parser("experiment", help="run an experiment spec")
    sp.add_argument("--spec", required=True, help="JSON experiment spec")
    sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("report", help="aggregate runs and render")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--metric", required=True)
    sp.add_argument("--format", choices=["csv", "json", "svg"], default="csv")
    sp.add_argument("--out", required=True)
    return p


def _cmd_standardize(args) -> int:
    from .molgraph import SmilesError, iter_corpus, write_canonical
    from .standardize import Protocol, SaltList, parse_smiles, standardize

    protocol = Protocol.from_string(args.protocol)
    salts = SaltList.from_file(args.salts) if args.salts else None
    out_path = _resolve_out(args.output)
    rejects_path = out_path + ".rejects.csv"
    n_ok = n_bad = 0
    with open(out_path, "w", encoding="utf-8") as out, \
            open(rejects_path, "w", newline="", encoding="utf-8") as rej:
        rej_writer = csv.writer(rej)
        rej_writer.writerow(["line_no", "error", "offset"])
        for line_no, text in iter_corpus(args.input):
            try:
                g = standardize(parse_smiles(text), protocol, salts)
                out.write(write_canonical(g) + "\n")
                n_ok += 1
            except SmilesError as exc:
                rej_writer.writerow([line_no, type(exc).__name__, exc.offset])
                n_bad += 1
    print(f"standardized {n_ok} molecules, rejected {n_bad} "
          f"(rejects in {rejects_path})")
    return EXIT_OK


def _cmd_inject_noise(args) -> int:
    from .datasets import (make_split, materialize_mixed_corpus, noise_counts,
                           save_manifest)

    with open(args.base, encoding="utf-8") as fh:
        n_total = sum(1 for _ in fh)
    split = make_split(n_total, args.train_frac, args.seed)
    a = args.a if args.a is not None else max(1, split.n_train // 2 ** args.kmax)
    grid = noise_counts(args.tau, args.nu, split.n_train, split.n_valid,
                        a, args.kmax)
    manifest = materialize_mixed_corpus(
        args.base, args.alt, grid, split, args.seed,
        _resolve_out(args.out_train), _resolve_out(args.out_valid),
        contiguous=args.contiguous)
    if args.manifest:
        save_manifest(manifest, _resolve_out(args.manifest))
    print(json.dumps(manifest["grid"], indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_bin_plan(args) -> int:
    from .datasets import bin_plan

    print(json.dumps(bin_plan(args.a, args.kmax, args.train_total),
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_train_tokenizer(args) -> int:
    from .subword import save_model, train_bpe, train_wordpiece

    with open(args.corpus, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    trainer = train_bpe if args.algorithm == "bpe" else train_wordpiece
    model = trainer(lines, args.vocab_size, args.min_frequency)
    manifest = save_model(model, _resolve_out(args.out))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_encode(args) -> int:
    from .subword import encode, load_model

    model = load_model(args.model)
    n = 0
    with open(args.input, encoding="utf-8") as inp, \
            open(_resolve_out(args.output), "w", encoding="utf-8") as out:
        for line in inp:
            line = line.strip()
            if not line:
                continue
            enc = encode(model, line)
            out.write(" ".join(str(i) for i in enc.ids) + "\n")
            n += 1
    print(f"encoded {n} lines")
    return EXIT_OK


def _load_train_config(path, seed):
    from .encoder import EncoderConfig, preset
    from .pretrain import TrainConfig

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    train_kwargs = raw.get("train", {})
    train_kwargs.setdefault("model_seed", seed)
    train_kwargs.setdefault("data_seed", seed)
    cfg = TrainConfig(**train_kwargs)
    enc = raw.get("encoder", "toy")
    if isinstance(enc, str):
        enc_cfg = preset(enc)
    elif "preset" in enc:
        name = enc.pop("preset")
        enc_cfg = preset(name, **enc)
    else:
        enc_cfg = EncoderConfig(**enc)
    return cfg, enc_cfg


def _cmd_pretrain(args) -> int:
    from dataclasses import replace

    from .encoder import init_params
    from .pretrain import train
    from .subword import load_model

    cfg, enc_cfg = _load_train_config(args.config, args.seed)
    tokenizer = load_model(args.tokenizer)
    enc_cfg = replace(enc_cfg, vocab_size=len(tokenizer.vocab))
    with open(args.train, encoding="utf-8") as fh:
        train_lines = [ln.strip() for ln in fh if ln.strip()]
    with open(args.valid, encoding="utf-8") as fh:
        valid_lines = [ln.strip() for ln in fh if ln.strip()]
    store = init_params(enc_cfg, seed=cfg.model_seed)
    manifest = train(store, enc_cfg, tokenizer, train_lines, valid_lines, cfg,
                     out_dir=_resolve_out(args.out), verbose=args.verbose)
    last = manifest.records[-1].as_dict() if manifest.records else {}
    print(json.dumps({"stop_reason": manifest.stop_reason, "last": last},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .encoder import load_checkpoint
    from .pretrain import TrainConfig, _encode_corpus, evaluate
    from .subword import load_model

    store, enc_cfg, _ = load_checkpoint(args.checkpoint)
    tokenizer = load_model(args.tokenizer)
    with open(args.corpus, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    cfg = TrainConfig(data_seed=args.seed, model_seed=args.seed,
                      mask_rate=args.mask_rate)
    metrics = evaluate(store, enc_cfg, _encode_corpus(tokenizer, lines), cfg,
                       epoch=1)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_finetune(args) -> int:
    import numpy as np

    from .encoder import load_checkpoint
    from .finetune import (load_dataset_csv, make_cv_plan, refit_and_test,
                           search)
    from .subword import load_model

    store, enc_cfg, _ = load_checkpoint(args.checkpoint)
    tokenizer = load_model(args.tokenizer)
    smiles, labels = load_dataset_csv(args.dataset)
    if args.log10_labels:
        labels = np.log10(labels)
    plan = make_cv_plan(len(smiles), args.seed)
    ranked = search(store, enc_cfg, tokenizer, smiles, labels, plan,
                    trials=args.trials, seed=args.seed,
                    max_epochs=args.max_epochs,
                    random_only=args.random_search)
    final = refit_and_test(store, enc_cfg, tokenizer, smiles, labels, plan,
                           ranked[0], seed=args.seed)
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trials.json"), "w", encoding="utf-8") as fh:
        json.dump([t.as_dict() for t in ranked], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "cv_mean", "cv_s_N", "test", "rendered"])
        for metric, label in (("mae", "MAE"), ("rmse", "RMSE"),
                              ("pearson_r", "Pearson R"), ("r2", "R2")):
            cv_vals = [getattr(r, metric) for r in final.best.fold_reports]
            writer.writerow([label,
                             f"{float(np.mean(cv_vals)):.6g}",
                             f"{float(np.std(cv_vals, ddof=1)):.6g}",
                             f"{getattr(final.test, metric):.6g}",
                             final.cv_summary[metric]])
    print(json.dumps(final.as_dict()["cv_summary"], indent=2, sort_keys=True))
    return EXIT_OK


_STATS_COLS = {
    "T-Loss": ("train", "loss"),
    "V-Loss": ("valid", "loss"),
    "V-Acc": ("valid", "acc"),
    "V-wF1": ("valid", "wf1"),
    "V-PPPL": ("valid", "pppl"),
}


def _cmd_stats(args) -> int:
    from .evalstats import summarize

    if args.col not in _STATS_COLS:
        raise ValueError(f"unknown column {args.col!r}; have {sorted(_STATS_COLS)}")
    split, field_name = _STATS_COLS[args.col]
    values = []
    for path in args.files:
        last = None
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["split"] == split and row[field_name] != "":
                    last = float(row[field_name])
        if last is None:
            raise ValueError(f"no {args.col} rows in {path}")
        values.append(last)
    print(json.dumps(summarize(values).as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_experiment(args) -> int:
    from .encoder import EncoderConfig
    from .experiments import ExperimentSpec, run_experiment
    from .pretrain import TrainConfig

    with open(args.spec, encoding="utf-8") as fh:
        raw = json.load(fh)
    raw["out_dir"] = _resolve_out(raw["out_dir"])
    if "train" in raw and isinstance(raw["train"], dict):
        raw["train"] = TrainConfig(**raw["train"])
    if "encoder" in raw and isinstance(raw["encoder"], dict):
        raw["encoder"] = EncoderConfig(**raw["encoder"])
    if "seeds" in raw:
        raw["seeds"] = [tuple(s) for s in raw["seeds"]]
    spec = ExperimentSpec(**raw)
    run_dirs = run_experiment(spec, verbose=args.verbose)
    print(json.dumps({"runs": run_dirs}, indent=2))
    stop_reasons = _stop_reasons(run_dirs)
    if stop_reasons and all(r == "diverged" for r in stop_reasons):
        print("every run diverged", file=sys.stderr)
        return EXIT_ALL_DIVERGED
    return EXIT_OK


def _stop_reasons(run_dirs) -> list[str]:
    reasons = []
    for d in run_dirs:
        path = os.path.join(d, "axis.json")
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                reasons.append(json.load(fh).get("stop_reason", ""))
    return reasons


def _cmd_report(args) -> int:
    from .experiments import aggregate, render

    sheet = aggregate(args.runs, args.metric)
    out = render(sheet, args.format, _resolve_out(args.out))
    print(out)
    return EXIT_OK


_HANDLERS = {
    "standardize": _cmd_standardize,
    "inject-noise": _cmd_inject_noise,
    "bin-plan": _cmd_bin_plan,
    "train-tokenizer": _cmd_train_tokenizer,
    "encode": _cmd_encode,
    "pretrain": _cmd_pretrain,
    "evaluate": _cmd_evaluate,
    "finetune": _cmd_finetune,
    "stats": _cmd_stats,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    if args.float32:
        import numpy as np

        from . import numcore
        numcore.DEFAULT_DTYPE = np.float32
    try:
        return _HANDLERS[args.verb](args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
