"""The trainable sequence predictor and its gradient interface.

The network is deliberately small: per position, a token embedding of
the current bridge state plus an additive time embedding and a linear
projection of the structure features, one contact-aggregation pass that
mixes neighbor states, and a softmax head.  Positions without contacts
receive no aggregation term, so structure coupling is observable in
isolation.

``predict`` runs on plain arrays or on taped parameters (see
:mod:`seqbridge.autodiff`); ``grad`` wires the two together and returns
exact reverse-mode derivatives for every parameter table.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, ShapeError
from .rng import stream
from .validation import check_finite

__all__ = [
    "PredictorParams",
    "PriorHeadParams",
    "PARAM_TABLES",
    "init_params",
    "init_prior_head",
    "predict",
    "predict_logits",
    "prior_encode",
    "grad",
    "taped",
]

PARAM_TABLES = ("token_embed", "time_embed", "feat_proj", "contact_in",
                "contact_out", "contact_bias", "head", "head_bias")


@dataclass
class PredictorParams:
    """All learnable tables; the shape header is (d, K, T, f)."""

    token_embed: np.ndarray   # (K, d)
    time_embed: np.ndarray    # (T, d)
    feat_proj: np.ndarray     # (f, d)
    contact_in: np.ndarray    # (d, d)
    contact_out: np.ndarray   # (d, d)
    contact_bias: np.ndarray  # (d,)
    head: np.ndarray          # (d, K)
    head_bias: np.ndarray     # (K,)

    def __post_init__(self):
        for name in PARAM_TABLES:
            setattr(self, name, check_finite(getattr(self, name), name))
        d = self.token_embed.shape[1]
        K = self.token_embed.shape[0]
        expected = {
            "time_embed": (self.T, d), "feat_proj": (self.f, d),
            "contact_in": (d, d), "contact_out": (d, d), "contact_bias": (d,),
            "head": (d, K), "head_bias": (K,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, "
                                 f"expected {shape}")

    @property
    def d(self) -> int:
        return self.token_embed.shape[1]

    @property
    def K(self) -> int:
        return self.token_embed.shape[0]

    @property
    def T(self) -> int:
        return self.time_embed.shape[0]

    @property
    def f(self) -> int:
        return self.feat_proj.shape[0]

    @property
    def dims(self) -> tuple:
        return (self.d, self.K, self.T, self.f)

    def copy(self) -> "PredictorParams":
        return PredictorParams(**{n: getattr(self, n).copy() for n in PARAM_TABLES})


@dataclass
class PriorHeadParams:
    """Linear features-to-token head; trained once, then frozen."""

    proj: np.ndarray  # (f, K)
    bias: np.ndarray  # (K,)

    def __post_init__(self):
        self.proj = check_finite(self.proj, "prior proj")
        self.bias = check_finite(self.bias, "prior bias")
        if self.bias.shape != (self.proj.shape[1],):
            raise ShapeError("prior bias width must match projection output")

    def copy(self) -> "PriorHeadParams":
        return PriorHeadParams(proj=self.proj.copy(), bias=self.bias.copy())


def _uniform(gen, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)


def init_params(seed: int, d: int, K: int, T: int, f: int) -> PredictorParams:
    """Zero-mean uniform init scaled by 1/sqrt(fan-in), per table."""
    for name, val in (("d", d), ("K", K), ("T", T), ("f", f)):
        if val < 1:
            raise ConfigError(f"dimension {name} must be >= 1, got {val}")
    specs = {
        "token_embed": ((K, d), K), "time_embed": ((T, d), T),
        "feat_proj": ((f, d), f), "contact_in": ((d, d), d),
        "contact_out": ((d, d), d), "contact_bias": ((d,), d),
        "head": ((d, K), d), "head_bias": ((K,), d),
    }
    tables = {name: _uniform(stream(seed, i), shape, fan)
              for i, (name, (shape, fan)) in enumerate(specs.items())}
    return PredictorParams(**tables)


def init_prior_head(seed: int, f: int, K: int) -> PriorHeadParams:
    if f < 1 or K < 1:
        raise ConfigError("prior head dimensions must be >= 1")
    return PriorHeadParams(proj=_uniform(stream(seed, 0), (f, K), f),
                           bias=_uniform(stream(seed, 1), (K,), f))


def _time_onehot(t, T: int, batched: bool) -> np.ndarray:
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise DomainError(f"timestep(s) {t} outside [0, {T})")
    out = np.zeros((t_arr.size, T))
    out[np.arange(t_arr.size), t_arr] = 1.0
    return out[:, None, :] if batched else out


def _aggregation_consts(S) -> tuple:
    deg = S.contacts.sum(axis=1)
    norm = np.where(deg > 0, deg, 1).astype(np.float64)
    a_norm = S.contacts.astype(np.float64) / norm[:, None]
    mask = (deg > 0).astype(np.float64)[:, None]
    return a_norm, mask


def predict_logits(params, z, S, t):
    """Pre-softmax logits; accepts (L, K) or batched (B, L, K) states.

    For batched input, ``t`` must be a length-B vector of timesteps.
    """
    z = np.asarray(z, dtype=np.float64)
    batched = z.ndim == 3
    if z.ndim not in (2, 3):
        raise ShapeError(f"state must be (L, K) or (B, L, K), got {z.shape}")
    K = ad.value_of(params.token_embed).shape[0]
    T = ad.value_of(params.time_embed).shape[0]
    f = ad.value_of(params.feat_proj).shape[0]
    if z.shape[-1] != K:
        raise ShapeError(f"state alphabet {z.shape[-1]} != embedding alphabet {K}")
    if z.shape[-2] != S.L:
        raise ShapeError(f"state length {z.shape[-2]} != structure length {S.L}")
    if S.feature_width != f:
        raise ShapeError(f"feature width {S.feature_width} != projection input {f}")

    h = ad.matmul(z, params.token_embed)
    h = ad.add(h, ad.matmul(_time_onehot(t, T, batched), params.time_embed))
    h = ad.add(h, ad.matmul(S.features, params.feat_proj))
    a_norm, mask = _aggregation_consts(S)
    agg = ad.matmul(a_norm, ad.matmul(h, params.contact_in))
    term = ad.mul(mask, ad.add(ad.matmul(agg, params.contact_out), params.contact_bias))
    h = ad.add(h, term)
    return ad.add(ad.matmul(h, params.head), params.head_bias)


def predict(params, z, S, t):
    """Row-stochastic prediction of the target sequence given state z at t."""
    return ad.softmax(predict_logits(params, z, S, t), axis=-1)


def prior_encode(prior_params: PriorHeadParams, S) -> np.ndarray:
    """Deterministic prior sequence: per-position argmax of projected features.

    Ties break toward the lowest token index.
    """
    if S.feature_width != prior_params.proj.shape[0]:
        raise ShapeError(f"feature width {S.feature_width} != prior head input "
                         f"{prior_params.proj.shape[0]}")
    logits = S.features @ prior_params.proj + prior_params.bias
    return logits.argmax(axis=1).astype(np.int64)


def taped(params) -> tuple:
    """Wrap parameter tables as tape leaves; returns (view, leaves)."""
    if isinstance(params, PredictorParams):
        names = PARAM_TABLES
        leaves = {n: ad.Var(getattr(params, n)) for n in names}
    else:
        leaves = {n: ad.Var(v) for n, v in params.items()}
    return SimpleNamespace(**leaves), leaves


def grad(loss_evaluator, params, extras: dict | None = None) -> tuple:
    """Exact reverse-mode gradients of a scalar loss.

    ``loss_evaluator(view, extra_view)`` must build the loss from the
    supplied taped views.  Returns (loss value, gradient bundle); the
    bundle maps each table name (and each extra) to an array of the
    same shape.
    """
    view, leaves = taped(params)
    extra_view = None
    if extras is not None:
        extra_view, extra_leaves = taped(extras)
        leaves = {**leaves, **extra_leaves}
    loss = loss_evaluator(view, extra_view) if extras is not None else loss_evaluator(view)
    bundle = ad.grad_of(loss, leaves)
    return float(ad.value_of(loss)), bundle
