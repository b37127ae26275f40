"""Synthetic inverse-folding universe.

Structures are contact maps with per-position features; ground truth
comes from an exact Potts oracle (per-position fields plus per-contact
couplings).  One interaction table and one class-conditioned field
table are shared across a world so the structure-to-sequence mapping
stays learnable at desk scale; per-structure randomness enters through
contacts, class assignments, and noise feature channels.

Feature layout produced by :func:`gen_structure`:

    channel 0             chain identity, scaled to [0, 1]
    channel 1             contact degree, scaled by 1/(L-1)
    channels 2 .. 2+C     position class, one-hot over C classes
    remaining channels    per-position noise in [-1, 1]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .rng import stream
from .validation import as_tokens, check_finite

__all__ = [
    "StructureContext",
    "PottsEnergyModel",
    "MutantRecord",
    "PreferencePair",
    "WorldRecord",
    "gen_structure",
    "unbound_context",
    "potts_energy",
    "binding_ddg_true",
    "native_sequence",
    "make_mutant_library",
    "make_world",
]

CHAIN_CHANNEL = 0
DEGREE_CHANNEL = 1
CLASS_CHANNEL_START = 2


@dataclass
class StructureContext:
    """Backbone surrogate: contacts, chain labels, per-position features."""

    id: str
    L: int
    contacts: np.ndarray
    chain_of: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.contacts = np.asarray(self.contacts, dtype=bool)
        self.chain_of = np.asarray(self.chain_of, dtype=np.int64)
        self.features = check_finite(self.features, "features")
        if self.contacts.shape != (self.L, self.L):
            raise ShapeError(f"contacts must be {self.L}x{self.L}, got {self.contacts.shape}")
        if not np.array_equal(self.contacts, self.contacts.T):
            raise ShapeError("contact map must be symmetric")
        if np.any(np.diag(self.contacts)):
            raise ShapeError("contact map diagonal must be empty")
        if self.chain_of.shape != (self.L,):
            raise ShapeError("chain_of length must match L")
        chains = np.unique(self.chain_of)
        if chains[0] != 0 or np.any(np.diff(chains) != 1):
            raise ShapeError("chain indices must be contiguous starting at 0")
        if np.any(np.diff(self.chain_of) < 0):
            raise ShapeError("chains must be contiguous position spans")
        if self.features.shape[0] != self.L:
            raise ShapeError("feature rows must match L")

    @property
    def num_chains(self) -> int:
        return int(self.chain_of.max()) + 1

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def contact_pairs(self):
        """Sorted (i, j) contact pairs with i < j."""
        ii, jj = np.nonzero(np.triu(self.contacts, k=1))
        return list(zip(ii.tolist(), jj.tolist()))


@dataclass
class PottsEnergyModel:
    """Exact energy oracle: fields h (L x K) and couplings J per contact."""

    h: np.ndarray
    J: dict

    def __post_init__(self):
        self.h = check_finite(self.h, "fields")
        for key, table in self.J.items():
            self.J[key] = check_finite(table, f"coupling {key}")

    @property
    def K(self) -> int:
        return self.h.shape[1]


@dataclass
class MutantRecord:
    """One scored mutant; lower score means better (lower energy)."""

    structure_id: str
    tokens: np.ndarray
    score: float
    ddg_vs_native: float

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


@dataclass
class PreferencePair:
    """Winner/loser sequences for one structure plus the ddG label.

    ddg_label follows the "loser score minus winner score" convention;
    for pairs built from energy-ranked pools it is strictly positive.
    """

    structure_id: str
    winner: np.ndarray
    loser: np.ndarray
    ddg_label: float

    def __post_init__(self):
        self.winner = np.asarray(self.winner, dtype=np.int64)
        self.loser = np.asarray(self.loser, dtype=np.int64)
        if self.winner.shape != self.loser.shape:
            raise ShapeError("winner and loser must have equal length")


@dataclass
class WorldRecord:
    """One structure with its oracle, native sequence, and mutant library."""

    structure: StructureContext
    potts: PottsEnergyModel
    native: np.ndarray
    mutants: list = field(default_factory=list)

    def __post_init__(self):
        self.native = np.asarray(self.native, dtype=np.int64)


def gen_structure(seed: int, L: int, num_chains: int, contact_density: float,
                  num_classes: int = 8, noise_channels: int = 6,
                  structure_id: str | None = None) -> StructureContext:
    """Generate a random structure: chains, contacts, features.

    Chains are contiguous spans of near-equal length.  Contacts are the
    union of the within-chain backbone path and random extra pairs that
    bring the count up to round(density * L*(L-1)/2); densities at or
    below the backbone level yield the backbone alone.  Multi-chain
    structures are guaranteed at least one inter-chain contact whenever
    any extra pair was drawn (the last extra is swapped if needed).
    """
    if L < 2:
        raise ConfigError(f"structure length must be >= 2, got {L}")
    if not (1 <= num_chains <= L):
        raise ConfigError(f"num_chains must lie in [1, {L}], got {num_chains}")
    if not (0.0 < contact_density <= 1.0):
        raise ConfigError(f"contact density must lie in (0, 1], got {contact_density}")

    base, rem = divmod(L, num_chains)
    sizes = [base + 1] * rem + [base] * (num_chains - rem)
    chain_of = np.repeat(np.arange(num_chains), sizes)

    contacts = np.zeros((L, L), dtype=bool)
    backbone = [(i, i + 1) for i in range(L - 1) if chain_of[i] == chain_of[i + 1]]
    for i, j in backbone:
        contacts[i, j] = contacts[j, i] = True

    gen = stream(seed, 0)
    total_pairs = L * (L - 1) // 2
    target = max(len(backbone), int(round(contact_density * total_pairs)))
    n_extra = target - len(backbone)
    candidates = [(i, j) for i in range(L) for j in range(i + 1, L)
                  if not contacts[i, j]]
    if n_extra > len(candidates):
        raise ConfigError(f"density {contact_density} asks for {target} contacts "
                          f"but only {len(candidates) + len(backbone)} pairs exist")
    extras = []
    if n_extra > 0:
        idx = gen.choice(len(candidates), size=n_extra, replace=False)
        extras = [candidates[k] for k in sorted(idx.tolist())]
        if num_chains >= 2 and not any(chain_of[i] != chain_of[j] for i, j in extras):
            cross = next((i, j) for (i, j) in candidates
                         if chain_of[i] != chain_of[j] and (i, j) not in extras)
            extras[-1] = cross
    for i, j in extras:
        contacts[i, j] = contacts[j, i] = True

    classes = stream(seed, 1).integers(0, num_classes, size=L)
    noise = stream(seed, 2).uniform(-1.0, 1.0, size=(L, noise_channels))
    features = _build_features(chain_of, contacts, classes, num_classes, noise)
    return StructureContext(
        id=structure_id if structure_id is not None else f"s{seed}",
        L=L, contacts=contacts, chain_of=chain_of, features=features)


def _build_features(chain_of, contacts, classes, num_classes, noise):
    L = chain_of.size
    num_chains = int(chain_of.max()) + 1
    chain_feat = chain_of / max(num_chains - 1, 1)
    degree = contacts.sum(axis=1) / max(L - 1, 1)
    class_onehot = np.zeros((L, num_classes))
    class_onehot[np.arange(L), classes] = 1.0
    return np.column_stack([chain_feat, degree, class_onehot, noise])


def class_assignments(S: StructureContext, num_classes: int) -> np.ndarray:
    """Recover position classes from the one-hot feature block."""
    block = S.features[:, CLASS_CHANNEL_START:CLASS_CHANNEL_START + num_classes]
    return block.argmax(axis=1).astype(np.int64)


def unbound_context(S: StructureContext, degree_channel: int | None = DEGREE_CHANNEL) -> StructureContext:
    """The same structure with inter-chain contacts removed.

    The contact-degree feature channel is recomputed against the
    reduced map so the model sees a consistent unbound input.
    """
    same_chain = S.chain_of[:, None] == S.chain_of[None, :]
    contacts = S.contacts & same_chain
    features = S.features.copy()
    if degree_channel is not None:
        features[:, degree_channel] = contacts.sum(axis=1) / max(S.L - 1, 1)
    return StructureContext(id=S.id + "/unbound", L=S.L, contacts=contacts,
                            chain_of=S.chain_of, features=features)


def potts_energy(S: StructureContext, potts: PottsEnergyModel, Y) -> float:
    """Sum of fields plus couplings over contact pairs (i < j)."""
    K = potts.K
    y = as_tokens(Y, K)
    if y.size != S.L or potts.h.shape != (S.L, K):
        raise ShapeError(f"sequence/fields must match structure length {S.L}")
    energy = float(potts.h[np.arange(S.L), y].sum())
    for i, j in S.contact_pairs():
        table = potts.J.get((i, j))
        if table is None:
            raise ShapeError(f"missing coupling table for contact ({i}, {j})")
        energy += float(table[y[i], y[j]])
    return energy


def _intra_energy(S: StructureContext, potts: PottsEnergyModel, y: np.ndarray) -> float:
    energy = float(potts.h[np.arange(S.L), y].sum())
    for i, j in S.contact_pairs():
        if S.chain_of[i] == S.chain_of[j]:
            energy += float(potts.J[(i, j)][y[i], y[j]])
    return energy


def binding_ddg_true(S: StructureContext, potts: PottsEnergyModel, Y_mut, Y_wt) -> float:
    """Oracle binding ddG: gap(mut) - gap(wt), gap = E_full - E_intra."""
    if S.num_chains < 2:
        raise DomainError("binding ddG needs at least two chains")
    mut = as_tokens(Y_mut, potts.K)
    wt = as_tokens(Y_wt, potts.K)
    gap_mut = potts_energy(S, potts, mut) - _intra_energy(S, potts, mut)
    gap_wt = potts_energy(S, potts, wt) - _intra_energy(S, potts, wt)
    return gap_mut - gap_wt


def native_sequence(S: StructureContext, potts: PottsEnergyModel,
                    anneal_steps: int, seed: int) -> np.ndarray:
    """Simulated annealing over single-token flips; returns the best state.

    Temperature decays geometrically from 2.0 to 0.01 across the steps.
    """
    if anneal_steps < 1:
        raise ConfigError("anneal_steps must be >= 1")
    K = potts.K
    gen = stream(seed)
    y = gen.integers(0, K, size=S.L)
    energy = potts_energy(S, potts, y)
    best, best_energy = y.copy(), energy

    neighbors = [[] for _ in range(S.L)]
    for i, j in S.contact_pairs():
        neighbors[i].append(j)
        neighbors[j].append(i)

    t_hi, t_lo = 2.0, 0.01
    for step in range(anneal_steps):
        frac = step / max(anneal_steps - 1, 1)
        temp = t_hi * (t_lo / t_hi) ** frac
        i = int(gen.integers(0, S.L))
        new = int(gen.integers(0, K - 1))
        if new >= y[i]:
            new += 1
        delta = potts.h[i, new] - potts.h[i, y[i]]
        for j in neighbors[i]:
            a, b = (i, j) if i < j else (j, i)
            table = potts.J[(a, b)]
            if i < j:
                delta += table[new, y[j]] - table[y[i], y[j]]
            else:
                delta += table[y[j], new] - table[y[j], y[i]]
        if delta <= 0 or gen.random() < np.exp(-delta / temp):
            y[i] = new
            energy += delta
            if energy < best_energy:
                best, best_energy = y.copy(), energy
    return best.astype(np.int64)


def make_mutant_library(S: StructureContext, potts: PottsEnergyModel, Y_native,
                        n_mutants: int, max_mutations: int, seed: int) -> list:
    """Random 1..max_mutations substitutions from the native, deduplicated.

    Scores are binding ddG against the native for multi-chain structures
    and total-energy differences for single-chain ones; either way lower
    is better and the native itself is excluded.
    """
    if n_mutants < 2:
        raise ConfigError("need n_mutants >= 2")
    K = potts.K
    if K < 2:
        raise ConfigError("alphabet too small to mutate")
    if max_mutations < 1 or max_mutations > S.L:
        raise ConfigError(f"max_mutations must lie in [1, {S.L}]")
    native = as_tokens(Y_native, K)
    gen = stream(seed)
    seen = {tuple(native.tolist())}
    records = []
    attempts = 0
    multi = S.num_chains >= 2
    native_energy = potts_energy(S, potts, native)
    while len(records) < n_mutants:
        attempts += 1
        if attempts > 200 * n_mutants:
            raise ConfigError("could not generate enough distinct mutants")
        k = int(gen.integers(1, max_mutations + 1))
        positions = gen.choice(S.L, size=k, replace=False)
        tokens = native.copy()
        for pos in positions:
            new = int(gen.integers(0, K - 1))
            if new >= tokens[pos]:
                new += 1
            tokens[pos] = new
        key = tuple(tokens.tolist())
        if key in seen:
            continue
        seen.add(key)
        if multi:
            score = binding_ddg_true(S, potts, tokens, native)
        else:
            score = potts_energy(S, potts, tokens) - native_energy
        records.append(MutantRecord(structure_id=S.id, tokens=tokens,
                                    score=score, ddg_vs_native=score))
    return records


def make_world(seed: int, n_structures: int, L_range: tuple, num_chains: int,
               K: int = 20, contact_density: float = 0.15,
               n_mutants: int = 60, max_mutations: int = 3,
               anneal_steps: int = 4000, num_classes: int = 8,
               noise_channels: int = 6, coupling_scale: float = 1.0,
               field_scale: float = 1.0) -> list:
    """Assemble a full world of structures, oracles, natives, and mutants.

    One K x K symmetric interaction table (entries uniform in [-1, 1],
    scaled) and one class-conditioned field table (entries uniform in
    [-0.5, 0.5], scaled) are drawn per world and shared by every
    structure, so held-out structures obey the same physics as training
    ones.
    """
    if n_structures < 1:
        raise ConfigError("need at least one structure")
    lo, hi = int(L_range[0]), int(L_range[1])
    if lo < 2 or hi < lo:
        raise ConfigError(f"bad length range {L_range}")

    world_gen = stream(seed, 0)
    upper = np.triu(world_gen.uniform(-1.0, 1.0, size=(K, K)))
    interaction = (upper + np.triu(upper, 1).T) * coupling_scale
    field_table = stream(seed, 1).uniform(-0.5, 0.5, size=(num_classes, K)) * field_scale

    records = []
    for idx in range(n_structures):
        sseed = int(stream(seed, 2, idx).integers(0, 2**62))
        L = int(stream(seed, 3, idx).integers(lo, hi + 1))
        S = gen_structure(sseed, L, num_chains, contact_density,
                          num_classes=num_classes, noise_channels=noise_channels,
                          structure_id=f"w{seed}-{idx}")
        classes = class_assignments(S, num_classes)
        potts = PottsEnergyModel(h=field_table[classes].copy(),
                                 J={pair: interaction for pair in S.contact_pairs()})
        native = native_sequence(S, potts, anneal_steps, int(stream(seed, 4, idx).integers(0, 2**62)))
        mutants = make_mutant_library(S, potts, native, n_mutants, max_mutations,
                                      int(stream(seed, 5, idx).integers(0, 2**62)))
        records.append(WorldRecord(structure=S, potts=potts, native=native,
                                   mutants=mutants))
    return records
