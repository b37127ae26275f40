"""Scalar training and ranking objectives.

Everything here is written against the autodiff op set, so each loss
can be evaluated on plain parameter tables (returns a numpy scalar) or
on taped views (returns a node ready for a backward pass).  Random
draws are controlled entirely by explicit seeds, which makes each loss
a deterministic function of (parameters, inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bridge import NoiseSchedule, forward_sample, loss_weight, refine_mask
from .errors import ConfigError, DomainError
from .predictor import predict_logits, prior_encode
from .rng import derive_seed, stream
from .validation import as_onehot, as_tokens

__all__ = [
    "DpoConfig",
    "EnergyLossState",
    "TotalLossConfig",
    "LOG_PROB_FLOOR",
    "pretrain_loss",
    "bridge_dpo_loss",
    "model_log_likelihood",
    "ddg_predict",
    "energy_loss",
    "total_loss",
    "posterior_score",
]

LOG_PROB_FLOOR = -30.0


@dataclass
class DpoConfig:
    """Strength and weighting of the preference loss."""

    beta_dpo: float
    T: int
    omega_mode: str = "constant"

    def __post_init__(self):
        if self.beta_dpo <= 0:
            raise ConfigError(f"beta_dpo must be positive, got {self.beta_dpo}")
        if self.omega_mode not in ("constant", "loss_weight"):
            raise ConfigError(f"unknown omega_mode '{self.omega_mode}'")

    def omega(self, t: int, schedule: NoiseSchedule) -> float:
        if self.omega_mode == "loss_weight":
            return loss_weight(t, schedule)
        return 1.0


@dataclass
class EnergyLossState:
    """Learnable temperature scale plus likelihood-estimator settings."""

    kbt: float = 1.0
    sample_count: int = 4
    eval_seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.kbt):
            raise ConfigError("kbt must be finite")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")


@dataclass
class TotalLossConfig:
    lambda_energy: float = 0.5

    def __post_init__(self):
        if self.lambda_energy < 0:
            raise ConfigError("lambda_energy must be non-negative")


def _clamped_logp(params, z_onehot, S, t):
    logits = predict_logits(params, z_onehot, S, t)
    return ad.clamp_min(ad.log_softmax(logits, axis=-1), LOG_PROB_FLOOR)


def pretrain_loss(params, X, Y, S, t: int, schedule: NoiseSchedule, rng_seed: int):
    """Refinement-masked cross entropy at one bridge step.

    Samples z_t from the forward process, then charges lambda_t times
    the negative log probability of the target token at every position
    that still disagrees with the target.
    """
    K = ad.value_of(params.token_embed).shape[0]
    lam = loss_weight(t, schedule)
    z = forward_sample(X, Y, t, schedule, rng_seed, K=K)
    v = refine_mask(z, Y, K=K).astype(np.float64)
    logp = _clamped_logp(params, as_onehot(z, K), S, t)
    picked = ad.vsum(ad.mul(logp, as_onehot(Y, K)), axis=-1)
    return ad.mul(ad.neg(ad.vsum(ad.mul(picked, v))), lam)


def bridge_dpo_loss(params, ref_params, prior_params, S, Y_w, Y_l, t: int,
                    schedule: NoiseSchedule, cfg: DpoConfig, rng_seed: int):
    """Preference loss contrasting squared prediction errors with a
    frozen reference.

    Winner and loser states are independent forward draws from the same
    structure-derived prior.  The loss is
    -log sigmoid(-beta * T * omega * ((err_w - ref_w) - (err_l - ref_l)))
    and equals ln 2 whenever the policy coincides with the reference.
    """
    K = ad.value_of(params.token_embed).shape[0]
    X = prior_encode(prior_params, S)
    z_w = forward_sample(X, Y_w, t, schedule, derive_seed(rng_seed, 0), K=K)
    z_l = forward_sample(X, Y_l, t, schedule, derive_seed(rng_seed, 1), K=K)
    states = np.stack([as_onehot(z_w, K), as_onehot(z_l, K)])
    targets = np.stack([as_onehot(Y_w, K), as_onehot(Y_l, K)])
    tt = np.array([t, t])

    def pair_errors(p):
        diff = ad.sub(targets, ad.softmax(predict_logits(p, states, S, tt), axis=-1))
        return ad.vsum(ad.mul(diff, diff), axis=(1, 2))

    delta = ad.sub(pair_errors(params), pair_errors(ref_params))
    inner = ad.vsum(ad.mul(delta, np.array([1.0, -1.0])))
    scale = cfg.beta_dpo * cfg.T * cfg.omega(t, schedule)
    return ad.softplus(ad.mul(inner, scale))


def model_log_likelihood(params, prior_params, Y, S, schedule: NoiseSchedule,
                         M: int, eval_seed: int):
    """Averaged conditional log likelihood of Y under the bridge predictor.

    Draws M timesteps uniformly from {0..T-1} (fixed by ``eval_seed``),
    samples z_t for each, and averages the summed log probability of
    the target tokens.  Deterministic given the seed.
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    K = ad.value_of(params.token_embed).shape[0]
    y = as_tokens(Y, K)
    X = prior_encode(prior_params, S)
    ts = stream(eval_seed, 0).integers(0, schedule.T, size=M)
    states = np.stack([
        as_onehot(forward_sample(X, y, int(ts[m]), schedule,
                                 derive_seed(eval_seed, 1, m), K=K), K)
        for m in range(M)
    ])
    logp = _clamped_logp(params, states, S, ts)
    per_draw = ad.vsum(ad.mul(logp, as_onehot(y, K)), axis=(1, 2))
    return ad.vmean(per_draw)


def ddg_predict(params, prior_params, pair, worlds, state: EnergyLossState,
                schedule: NoiseSchedule, kbt=None):
    """Binding ddG estimate from bound/unbound log-likelihood ratios.

    ``worlds`` maps structure ids to (bound, unbound) contexts.  All
    four likelihoods share ``state.eval_seed`` so identical sequences
    cancel exactly; winner and loser are evaluated in one batched pass
    per context, which reproduces the four-call composition of
    :func:`model_log_likelihood`.  The prediction is oriented like the
    pair labels: it estimates (loser score - winner score).
    """
    bound, unbound = _lookup_contexts(worlds, pair.structure_id)
    if bound.num_chains < 2:
        raise DomainError("ddG prediction needs a structure with >= 2 chains")
    if kbt is None:
        kbt = state.kbt
    M, seed = state.sample_count, state.eval_seed
    K = ad.value_of(params.token_embed).shape[0]
    yw = as_tokens(pair.winner, K)
    yl = as_tokens(pair.loser, K)

    def ratio_gap(S):
        """ll(winner|S) - ll(loser|S) from one batched prediction."""
        X = prior_encode(prior_params, S)
        ts = stream(seed, 0).integers(0, schedule.T, size=M)
        states, targets = [], []
        for y in (yw, yl):
            for m in range(M):
                z = forward_sample(X, y, int(ts[m]), schedule,
                                   derive_seed(seed, 1, m), K=K)
                states.append(as_onehot(z, K))
                targets.append(as_onehot(y, K))
        logp = _clamped_logp(params, np.stack(states), S, np.concatenate([ts, ts]))
        per_draw = ad.vsum(ad.mul(logp, np.stack(targets)), axis=(1, 2))
        signs = np.concatenate([np.full(M, 1.0 / M), np.full(M, -1.0 / M)])
        return ad.vsum(ad.mul(per_draw, signs))

    inner = ad.sub(ratio_gap(bound), ratio_gap(unbound))
    return ad.neg(ad.mul(kbt, inner))


def energy_loss(params, prior_params, pairs, worlds, state: EnergyLossState,
                schedule: NoiseSchedule, kbt=None):
    """Mean absolute error between predicted and labeled ddG values."""
    pairs = list(pairs)
    if not pairs:
        raise DomainError("energy loss needs a non-empty pair set")
    terms = [
        ad.absolute(ad.sub(ddg_predict(params, prior_params, p, worlds, state,
                                       schedule, kbt=kbt), p.ddg_label))
        for p in pairs
    ]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(pairs))


def total_loss(dpo_term, energy_term, cfg: TotalLossConfig, mode: str = "full"):
    """Weighted fine-tuning objective; ``mode`` selects the ablations."""
    if mode == "full":
        return ad.add(dpo_term, ad.mul(energy_term, cfg.lambda_energy))
    if mode == "dpo_only":
        return dpo_term
    if mode == "energy_only":
        return energy_term
    raise ConfigError(f"unknown total-loss mode '{mode}'")


def posterior_score(params, prior_params, Y, S, schedule: NoiseSchedule,
                    energy_fn, beta_post: float, M: int = 4, eval_seed: int = 0):
    """Design-ranking utility: log likelihood minus beta times energy."""
    if beta_post < 0:
        raise ConfigError("beta_post must be non-negative")
    ll = model_log_likelihood(params, prior_params, Y, S, schedule, M, eval_seed)
    return float(ad.value_of(ll)) - beta_post * float(energy_fn(S, Y))


def _lookup_contexts(worlds, structure_id):
    try:
        entry = worlds[structure_id]
    except KeyError:
        raise DomainError(f"unknown structure id '{structure_id}'") from None
    return entry
