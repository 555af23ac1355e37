"""Deterministic corpus splitting, exponential size binning, and
standardization-noise injection.

Counts follow the published recipe: training bins grow as a * 2^k with a
correction b that makes the last bin cover the 80% training split exactly,
and the (tau, nu) grid controls how many training/validation lines are
replaced by their alternate-protocol counterparts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Published PubChem split sizes; used as defaults when binning with the
# published first-bin size.
PAPER_TOTAL = 119_184_806
PAPER_N_TRAIN = 95_347_844
PAPER_N_VALID = 23_836_962
PAPER_FIRST_BIN = 2_979_620
PAPER_K_MAX = 5


class InvalidFraction(ValueError):
    pass


class Overflow(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n_total: int, train_frac: float) -> tuple[int, int]:
    """Training/validation sizes: floor(frac * n) train, remainder valid."""
    if not 0.0 < train_frac < 1.0:
        raise InvalidFraction(f"train_frac must be in (0, 1), got {train_frac}")
    n_train = int(math.floor(train_frac * n_total))
    return n_train, n_total - n_train


@dataclass
class SplitPlan:
    seed: int
    n_total: int
    n_train: int
    n_valid: int
    train_indices: np.ndarray
    valid_indices: np.ndarray

    def describe(self) -> dict:
        return {"seed": self.seed, "n_total": self.n_total,
                "n_train": self.n_train, "n_valid": self.n_valid}


def make_split(n_total: int, train_frac: float, seed: int) -> SplitPlan:
    """Uniformly shuffled train/validation split, reproducible from the seed."""
    n_train, n_valid = split_counts(n_total, train_frac)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_total)
    return SplitPlan(seed=seed, n_total=n_total, n_train=n_train, n_valid=n_valid,
                     train_indices=perm[:n_train], valid_indices=perm[n_train:])


def bin_size(k: int, a: int, k_max: int = PAPER_K_MAX,
             train_total: int | None = None) -> int:
    """Training-bin size a * 2^k + b.

    b is nonzero only at k == k_max, where it corrects the final bin to cover
    the full training split: the published counts give b = 4, and in generic
    mode b = train_total - a * 2^k_max for a caller-supplied total.
    """
    if not 0 <= k <= k_max:
        raise ValueError(f"bin index {k} outside 0..{k_max}")
    if train_total is None and a == PAPER_FIRST_BIN and k_max == PAPER_K_MAX:
        train_total = PAPER_N_TRAIN
    b = 0
    if k == k_max and train_total is not None:
        b = train_total - a * 2 ** k_max
    return a * 2 ** k + b


@dataclass
class NoiseGrid:
    tau: int
    nu: float
    n_c_train: int
    n_p_train: int
    n_c_valid: int
    n_p_valid: int

    def as_dict(self) -> dict:
        return {"tau": self.tau, "nu": self.nu,
                "N_C_train": self.n_c_train, "N_P_train": self.n_p_train,
                "N_C_valid": self.n_c_valid, "N_P_valid": self.n_p_valid}


def noise_counts(tau: int, nu: float, n_train: int, n_valid: int,
                 a: int, k_max: int = PAPER_K_MAX) -> NoiseGrid:
    """How many training/validation lines come from the alternate protocol.

    n_c_valid uses round-half-up; the published counts are exact at
    nu in {0.0, 0.5, 1.0} because the validation split size is even.
    """
    if not 0 <= tau <= k_max:
        raise ValueError(f"tau {tau} outside 0..{k_max}")
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu {nu} outside [0, 1]")
    n_c_train = bin_size(tau, a, k_max,
                         train_total=n_train if a != PAPER_FIRST_BIN else None)
    if n_c_train > n_train:
        raise Overflow(f"corrupted-train count {n_c_train} exceeds split size {n_train}")
    n_c_valid = round_half_up(nu * n_valid)
    return NoiseGrid(tau=tau, nu=nu,
                     n_c_train=n_c_train, n_p_train=n_train - n_c_train,
                     n_c_valid=n_c_valid, n_p_valid=n_valid - n_c_valid)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_mixed(out_path, indices, base, alt, n_alt, rng, contiguous):
    if contiguous:
        chosen = set(range(n_alt))
    else:
        chosen = set(int(p) for p in rng.permutation(len(indices))[:n_alt])
    with open(out_path, "w", encoding="utf-8") as fh:
        for pos, line_idx in enumerate(indices):
            source = alt if pos in chosen else base
            fh.write(source[int(line_idx)] + "\n")


def materialize_mixed_corpus(base_path, alt_path, grid: NoiseGrid,
                             split: SplitPlan, seed: int,
                             out_train, out_valid,
                             contiguous: bool = False) -> dict:
    """Write train/valid files mixing base- and alternate-protocol lines.

    base and alt must be line-aligned (same molecule per line number); the
    replacement positions are a seeded shuffle of each split. Returns a
    manifest with all counts, seeds, and output file hashes.
    """
    with open(base_path, encoding="utf-8") as fh:
        base = [ln.rstrip("\n") for ln in fh]
    with open(alt_path, encoding="utf-8") as fh:
        alt = [ln.rstrip("\n") for ln in fh]
    if len(base) != len(alt):
        raise AlignmentError(f"base has {len(base)} lines but alt has {len(alt)}")
    if split.n_total != len(base):
        raise AlignmentError(
            f"split plan covers {split.n_total} lines but corpus has {len(base)}")
    if grid.n_c_train + grid.n_p_train != split.n_train \
            or grid.n_c_valid + grid.n_p_valid != split.n_valid:
        raise AlignmentError("noise grid counts do not match the split sizes")

    _write_mixed(out_train, split.train_indices, base, alt, grid.n_c_train,
                 np.random.default_rng([seed, 0]), contiguous)
    _write_mixed(out_valid, split.valid_indices, base, alt, grid.n_c_valid,
                 np.random.default_rng([seed, 1]), contiguous)
    return {
        "grid": grid.as_dict(),
        "split": split.describe(),
        "mix_seed": seed,
        "contiguous": contiguous,
        "files": {
            "train": {"path": str(out_train), "sha256": _sha256(out_train),
                      "lines": split.n_train},
            "valid": {"path": str(out_valid), "sha256": _sha256(out_valid),
                      "lines": split.n_valid},
        },
    }


def bin_plan(a: int, k_max: int = PAPER_K_MAX,
             train_total: int | None = None) -> dict:
    """All bin sizes for k = 0..k_max, as a JSON-ready manifest."""
    sizes = {k: bin_size(k, a, k_max, train_total) for k in range(k_max + 1)}
    return {"a": a, "k_max": k_max, "sizes": sizes}


def save_manifest(manifest: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
