"""Preference-pair construction and structure-level data splits.

Scores follow the package-wide "lower is better" convention (energies);
winners come from the best quantile, losers from the worst, and every
emitted pair has a strictly better winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PairingError
from .rng import stream
from .world import MutantRecord, PreferencePair

__all__ = [
    "PairingConfig",
    "build_pairs",
    "split_by_structure",
    "kfold_by_structure",
]


@dataclass
class PairingConfig:
    top_frac: float
    bottom_frac: float
    pairs_per_structure: int
    seed: int = 0

    def __post_init__(self):
        for name, frac in (("top_frac", self.top_frac), ("bottom_frac", self.bottom_frac)):
            if not (0.0 < frac <= 0.5):
                raise ConfigError(f"{name} must lie in (0, 0.5], got {frac}")
        if self.top_frac + self.bottom_frac > 1.0:
            raise ConfigError("quantile fractions overlap: top_frac + bottom_frac > 1")
        if self.pairs_per_structure < 1:
            raise ConfigError("pairs_per_structure must be >= 1")


def build_pairs(records: list, cfg: PairingConfig) -> list:
    """Quantile-select winners and losers, then randomly pair them.

    Records are sorted by (score, tokens) so the result is independent
    of input order.  Pair index combinations are drawn without
    replacement whenever the pool product covers the request, and with
    replacement otherwise.  Sampled combinations whose scores tie are
    dropped, so all-equal scores yield zero pairs.
    """
    records = list(records)
    if len(records) < 2:
        raise PairingError(f"need at least 2 scored records, got {len(records)}")
    ids = {r.structure_id for r in records}
    if len(ids) != 1:
        raise PairingError(f"records span multiple structures: {sorted(ids)}")

    ordered = sorted(records, key=lambda r: (r.score, tuple(r.tokens.tolist())))
    n = len(ordered)
    n_top = math.ceil(cfg.top_frac * n)
    n_bottom = math.ceil(cfg.bottom_frac * n)
    winners = ordered[:n_top]
    losers = ordered[n - n_bottom:]
    if not winners or not losers:
        raise PairingError("quantile pools are empty")

    total = len(winners) * len(losers)
    gen = stream(cfg.seed)
    if total >= cfg.pairs_per_structure:
        picks = gen.choice(total, size=cfg.pairs_per_structure, replace=False)
    else:
        picks = gen.integers(0, total, size=cfg.pairs_per_structure)

    pairs = []
    for flat in np.sort(picks).tolist():
        w = winners[flat // len(losers)]
        l = losers[flat % len(losers)]
        if not (w.score < l.score):
            continue
        pairs.append(PreferencePair(structure_id=w.structure_id,
                                    winner=w.tokens.copy(), loser=l.tokens.copy(),
                                    ddg_label=float(l.score - w.score)))
    return pairs


def _shuffled(ids, seed: int) -> list:
    ordered = sorted(str(i) for i in ids)
    if len(set(ordered)) != len(ordered):
        raise ConfigError("structure ids must be unique")
    perm = stream(seed).permutation(len(ordered))
    return [ordered[i] for i in perm]


def split_by_structure(structure_ids, fractions, seed: int) -> tuple:
    """Partition ids into (train, val, test) by shuffled assignment.

    Val and test sizes are floored; the remainder goes to train.
    """
    train_frac, val_frac, test_frac = (float(f) for f in fractions)
    if abs(train_frac + val_frac + test_frac - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    ids = list(structure_ids)
    nonzero = sum(1 for f in (train_frac, val_frac, test_frac) if f > 0)
    if len(ids) < nonzero:
        raise ConfigError(f"{len(ids)} ids cannot fill {nonzero} non-empty splits")
    shuffled = _shuffled(ids, seed)
    n = len(shuffled)
    n_val = math.floor(val_frac * n)
    n_test = math.floor(test_frac * n)
    n_train = n - n_val - n_test
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return train, val, test


def kfold_by_structure(structure_ids, k: int, seed: int) -> list:
    """Near-equal disjoint folds; remainders land in the earliest folds."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    ids = list(structure_ids)
    if k > len(ids):
        raise ConfigError(f"k={k} exceeds the {len(ids)} available ids")
    shuffled = _shuffled(ids, seed)
    base, rem = divmod(len(shuffled), k)
    folds, start = [], 0
    for fold_idx in range(k):
        size = base + (1 if fold_idx < rem else 0)
        folds.append(shuffled[start:start + size])
        start += size
    return folds
