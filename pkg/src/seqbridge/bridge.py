"""Categorical Markov bridge kernels.

A bridge over a K-letter alphabet starts at a prior sequence X and is
pinned to end at a target sequence Y after T steps.  Each position
evolves independently: at step t the token survives with probability
beta_t and otherwise jumps to the target token.  The survival product
s_t = prod_{u<t} beta_u gives the closed-form marginal at any step,
which every sampler here is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .rng import stream
from .validation import as_onehot, as_tokens

__all__ = [
    "NoiseSchedule",
    "make_cosine_schedule",
    "transition_matrix",
    "forward_marginal",
    "forward_sample",
    "refine_mask",
    "loss_weight",
    "reverse_sample",
]

LOSS_WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival probabilities of a T-step bridge.

    betas[t] is the probability a token stays put at step t; survival[t]
    is the probability it has not jumped before step t (survival[0] = 1,
    survival[T] = 0).
    """

    T: int
    betas: np.ndarray
    survival: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"schedule needs T >= 2, got {self.T}")
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ShapeError(f"expected {self.T} betas, got shape {betas.shape}")
        if betas[0] != 1.0 or betas[-1] != 0.0:
            raise ConfigError("schedule must start at beta=1 and end at beta=0")
        if np.any(betas < 0.0) or np.any(betas > 1.0):
            raise ConfigError("betas must lie in [0, 1]")
        if np.any(np.diff(betas) > 0.0):
            raise ConfigError("betas must be non-increasing")
        survival = np.concatenate([[1.0], np.cumprod(betas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "survival", survival)

    def check_time(self, t: int, inclusive: bool = True) -> int:
        hi = self.T if inclusive else self.T - 1
        t = int(t)
        if not (0 <= t <= hi):
            raise DomainError(f"timestep {t} outside [0, {hi}]")
        return t


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Cosine-squared schedule: beta_t = cos^2((t/(T-1)) * pi/2).

    Hits beta_0 = 1 and beta_{T-1} = 0 exactly.
    """
    if T < 2:
        raise ConfigError(f"cosine schedule needs T >= 2, got {T}")
    t = np.arange(T, dtype=np.float64)
    betas = np.cos(t / (T - 1) * np.pi / 2.0) ** 2
    betas[0] = 1.0
    betas[-1] = 0.0
    return NoiseSchedule(T=T, betas=betas)


def transition_matrix(target_token: int, beta_t: float, K: int) -> np.ndarray:
    """K x K column-stochastic kernel beta*I + (1-beta) * e_target 1^T.

    Column j is the next-token distribution given current token j.
    """
    beta_t = float(beta_t)
    if not (0.0 <= beta_t <= 1.0):
        raise DomainError(f"beta must lie in [0, 1], got {beta_t}")
    target_token = int(target_token)
    if not (0 <= target_token < K):
        raise DomainError(f"target token {target_token} outside [0, {K})")
    Q = beta_t * np.eye(K)
    Q[target_token, :] += 1.0 - beta_t
    return Q


def forward_marginal(prior_token: int, target_token: int, t: int,
                     schedule: NoiseSchedule, K: int) -> np.ndarray:
    """Closed-form distribution of z_t for one position.

    Mass survival[t] on the prior token and the rest on the target (all
    mass on the shared token when they coincide).
    """
    t = schedule.check_time(t)
    prior_token, target_token = int(prior_token), int(target_token)
    for tok in (prior_token, target_token):
        if not (0 <= tok < K):
            raise DomainError(f"token {tok} outside [0, {K})")
    p = np.zeros(K, dtype=np.float64)
    s = schedule.survival[t]
    p[prior_token] += s
    p[target_token] += 1.0 - s
    return p


def forward_sample(X, Y, t: int, schedule: NoiseSchedule, rng_seed: int,
                   K: int | None = None) -> np.ndarray:
    """Sample z_t ~ p(z_t | X, Y) position-wise; returns a token vector.

    X and Y may be token vectors or one-hot matrices of equal length.
    Deterministic given ``rng_seed``.
    """
    x, y, K = _token_pair(X, Y, K)
    t = schedule.check_time(t)
    s = schedule.survival[t]
    gen = stream(rng_seed)
    keep = gen.random(x.size) < s
    return np.where(keep, x, y).astype(np.int64)


def refine_mask(z_t, Y, K: int | None = None) -> np.ndarray:
    """0/1 vector marking positions where the state disagrees with Y."""
    z, y, _ = _token_pair(z_t, Y, K)
    return (z != y).astype(np.int64)


def loss_weight(t: int, schedule: NoiseSchedule) -> float:
    """Probability a token flips exactly at step t, floored at 1e-8.

    lambda_t = survival[t] - survival[t+1]; the floor keeps degenerate
    steps (no mass moving) from zeroing their training signal.
    """
    t = schedule.check_time(t, inclusive=False)
    raw = schedule.survival[t] - schedule.survival[t + 1]
    return max(float(raw), LOSS_WEIGHT_FLOOR)


def reverse_sample(predict_fn, prior_fn, structure, schedule: NoiseSchedule,
                   rng_seed: int, K: int) -> np.ndarray:
    """Generate a sequence by running the learned bridge in reverse.

    Starts at z_0 = prior_fn(structure); at each step the next token is
    drawn from beta_t * z_t + (1 - beta_t) * yhat where yhat =
    predict_fn(z_t, structure, t) is a row-stochastic L x K matrix.
    beta_{T-1} = 0 pins the final draw entirely to yhat.  Returns the
    final token vector; deterministic given ``rng_seed``.
    """
    z = as_tokens(prior_fn(structure), K)
    L = z.size
    gen = stream(rng_seed)
    for t in range(schedule.T):
        beta = schedule.betas[t]
        yhat = np.asarray(predict_fn(as_onehot(z, K), structure, t), dtype=np.float64)
        if yhat.shape != (L, K):
            raise ShapeError(f"predictor returned shape {yhat.shape}, expected {(L, K)}")
        probs = beta * as_onehot(z, K) + (1.0 - beta) * yhat
        z = _sample_rows(probs, gen)
    return z


def _sample_rows(probs: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """One categorical draw per row via inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = gen.random(probs.shape[0]) * cdf[:, -1]
    return (cdf < u[:, None]).sum(axis=1).astype(np.int64)


def _token_pair(A, B, K: int | None):
    a, ka = _coerce(A, K)
    b, kb = _coerce(B, K if K is not None else ka)
    K = ka if ka is not None else kb
    if K is None:
        raise ShapeError("alphabet size K could not be inferred; pass K explicitly")
    if a.size != b.size:
        raise ShapeError(f"sequences must have equal length, got {a.size} and {b.size}")
    return as_tokens(a, K), as_tokens(b, K), K


def _coerce(seq, K: int | None):
    arr = np.asarray(seq)
    if arr.ndim == 2:
        return arr.argmax(axis=1).astype(np.int64), arr.shape[1]
    return arr, K
