"""Deterministic optimization loops.

Three phases: prior-head training (cross entropy on features to native
tokens), bridge pretraining (refinement-masked cross entropy), and
preference fine-tuning (DPO plus the ddG constraint, with ablation
switches).  Every stochastic choice is derived from the config seed, so
a (dataset, config) pair reproduces bit-identical checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .bridge import NoiseSchedule, make_cosine_schedule
from .errors import ConfigError, DomainError, NumericalError
from .objectives import (DpoConfig, EnergyLossState, TotalLossConfig,
                         bridge_dpo_loss, energy_loss, pretrain_loss, total_loss)
from .predictor import (PARAM_TABLES, PredictorParams, PriorHeadParams, grad,
                        init_params, init_prior_head, prior_encode)
from .rng import derive_seed, stream
from .world import unbound_context

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Checkpoint",
    "noam_lr",
    "adam_step",
    "train_prior_head",
    "pretrain",
    "dpo_finetune",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

LOSS_MODES = ("pretrain", "dpo_energy", "dpo_only", "energy_only")


@dataclass
class TrainConfig:
    """Knobs for one training phase.

    ``batch_size`` counts residues during pretraining and pairs during
    fine-tuning.  Defaults are desk-scale: 50 pretrain epochs under a
    noam schedule and 150 constant-rate fine-tune epochs.
    """

    epochs: int = 50
    batch_size: int = 2000
    base_lr: float = 1e-3
    lr_schedule: str = "noam"
    warmup: int = 100
    noam_dim: int | None = None
    seed: int = 0
    loss_mode: str = "pretrain"
    timesteps: int = 25
    hidden_dim: int = 48
    sample_count: int = 4
    patience: int = 10
    prior_epochs: int = 300
    prior_lr: float = 0.05
    dpo: DpoConfig | None = None
    total: TotalLossConfig = field(default_factory=TotalLossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.lr_schedule not in ("noam", "constant"):
            raise ConfigError(f"unknown lr schedule '{self.lr_schedule}'")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode '{self.loss_mode}'")
        if self.dpo is None:
            self.dpo = DpoConfig(beta_dpo=0.05, T=self.timesteps)

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.base_lr
        dim = self.noam_dim if self.noam_dim is not None else self.hidden_dim
        return noam_lr(step, self.warmup, dim, self.base_lr)


@dataclass
class OptimizerState:
    """Adam moments per parameter table plus the step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "OptimizerState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()},
                   step=0)


@dataclass
class Checkpoint:
    """Trained parameters plus enough context to resume or evaluate."""

    params: PredictorParams
    prior: PriorHeadParams
    kbt: float
    schedule_T: int
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint(params=self.params.copy(), prior=self.prior.copy(),
                          kbt=float(self.kbt), schedule_T=self.schedule_T,
                          config=dict(self.config), version=self.version)

    def schedule(self) -> NoiseSchedule:
        return make_cosine_schedule(self.schedule_T)


def noam_lr(step: int, warmup: int, dim: int, base_lr: float) -> float:
    """base_lr * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1 or warmup < 1:
        raise ConfigError("noam schedule needs step >= 1 and warmup >= 1")
    return base_lr * dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> tuple:
    """One bias-corrected Adam update; returns new (params, state).

    Raises NumericalError (before touching any state) on non-finite
    gradients.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for '{name}'; step aborted")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for name, value in params.items():
        g = grads[name]
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        new_params[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(m=new_m, v=new_v, step=step)


def _params_to_dict(params: PredictorParams) -> dict:
    return {n: getattr(params, n).copy() for n in PARAM_TABLES}


def _dict_to_params(tables: dict) -> PredictorParams:
    return PredictorParams(**{n: tables[n] for n in PARAM_TABLES})


def train_prior_head(worlds, config: TrainConfig) -> PriorHeadParams:
    """Cross-entropy training of the features-to-token head.

    Full-batch Adam over every position of every structure; zero epochs
    returns the initialized head unchanged.
    """
    if not worlds:
        raise ConfigError("prior-head training needs a non-empty dataset")
    K = worlds[0].potts.K
    feats = np.concatenate([w.structure.features for w in worlds])
    tokens = np.concatenate([w.native for w in worlds])
    onehot = np.zeros((tokens.size, K))
    onehot[np.arange(tokens.size), tokens] = 1.0

    head = init_prior_head(derive_seed(config.seed, 100), worlds[0].structure.feature_width, K)
    tables = {"proj": head.proj, "bias": head.bias}
    opt = OptimizerState.init(tables)
    for _ in range(config.prior_epochs):
        def loss_fn(view):
            logits = ad.add(ad.matmul(feats, view.proj), view.bias)
            logp = ad.log_softmax(logits, axis=-1)
            return ad.neg(ad.vmean(ad.vsum(ad.mul(logp, onehot), axis=-1)))
        value, grads = grad(loss_fn, tables)
        if not np.isfinite(value):
            raise NumericalError(f"prior-head loss diverged: {value}")
        tables, opt = adam_step(tables, grads, opt, config.prior_lr)
    return PriorHeadParams(proj=tables["proj"], bias=tables["bias"])


def _residue_batches(indices, lengths, budget):
    """Group example indices into batches of at most ``budget`` residues."""
    batches, current, used = [], [], 0
    for idx in indices:
        if current and used + lengths[idx] > budget:
            batches.append(current)
            current, used = [], 0
        current.append(idx)
        used += lengths[idx]
    if current:
        batches.append(current)
    return batches


def pretrain(train_worlds, val_worlds, config: TrainConfig,
             prior: PriorHeadParams) -> tuple:
    """Bridge pretraining; returns (best-validation Checkpoint, history).

    Each example draws its own timestep and forward sample.  Validation
    uses frozen draws so epoch losses are comparable; early stopping
    waits ``config.patience`` epochs past the best validation loss.
    """
    if not train_worlds:
        raise ConfigError("pretraining needs a non-empty dataset")
    schedule = make_cosine_schedule(config.timesteps)
    K = train_worlds[0].potts.K
    f = train_worlds[0].structure.feature_width
    params = init_params(derive_seed(config.seed, 101), config.hidden_dim, K,
                         config.timesteps, f)
    tables = _params_to_dict(params)
    opt = OptimizerState.init(tables)

    priors_train = [prior_encode(prior, w.structure) for w in train_worlds]
    priors_val = [prior_encode(prior, w.structure) for w in val_worlds]
    lengths = [w.structure.L for w in train_worlds]

    def epoch_loss(view, batch, seeds_and_ts):
        terms = []
        for idx, (t, seed) in zip(batch, seeds_and_ts):
            w = train_worlds[idx]
            terms.append(pretrain_loss(view, priors_train[idx], w.native,
                                       w.structure, t, schedule, seed))
        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        return ad.mul(total, 1.0 / len(terms))

    def val_loss(current: PredictorParams) -> float:
        if not val_worlds:
            return float("nan")
        vals = []
        for idx, w in enumerate(val_worlds):
            t = int(stream(config.seed, 300, idx).integers(0, schedule.T))
            seed = derive_seed(config.seed, 301, idx)
            vals.append(float(ad.value_of(pretrain_loss(
                current, priors_val[idx], w.native, w.structure, t, schedule, seed))))
        return float(np.mean(vals))

    history = []
    best = (np.inf, _dict_to_params(tables), 0)
    for epoch in range(config.epochs):
        order = stream(config.seed, 200, epoch).permutation(len(train_worlds))
        epoch_losses = []
        for b, batch in enumerate(_residue_batches(order.tolist(), lengths, config.batch_size)):
            draws = [(int(stream(config.seed, 201, epoch, b, i).integers(0, schedule.T)),
                      derive_seed(config.seed, 202, epoch, b, i))
                     for i in range(len(batch))]
            value, grads = grad(lambda view: epoch_loss(view, batch, draws), tables)
            if not np.isfinite(value):
                raise NumericalError(f"pretrain loss diverged at epoch {epoch}: {value}")
            tables, opt = adam_step(tables, grads, opt, config.lr_at(opt.step + 1))
            epoch_losses.append(value)
        current = _dict_to_params(tables)
        vloss = val_loss(current)
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                        "val_loss": vloss})
        score = vloss if np.isfinite(vloss) else history[-1]["train_loss"]
        if score < best[0] - 1e-12:
            best = (score, current.copy(), epoch)
        elif epoch - best[2] >= config.patience:
            break

    chosen = best[1] if best[0] < np.inf else _dict_to_params(tables)
    ckpt = Checkpoint(params=chosen, prior=prior.copy(), kbt=1.0,
                      schedule_T=config.timesteps, config=_echo(config))
    return ckpt, history


def dpo_finetune(worlds, pairs, ref_checkpoint: Checkpoint,
                 config: TrainConfig) -> tuple:
    """Preference fine-tuning from a frozen reference checkpoint.

    ``config.loss_mode`` selects the objective: dpo_energy (full),
    dpo_only (no ddG constraint; kbt never moves), or energy_only.
    Runs the configured number of epochs and returns the final
    checkpoint plus per-epoch loss records.
    """
    if config.loss_mode not in ("dpo_energy", "dpo_only", "energy_only"):
        raise ConfigError(f"loss mode '{config.loss_mode}' is not a fine-tuning mode")
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("fine-tuning needs a non-empty pair dataset")
    schedule = make_cosine_schedule(ref_checkpoint.schedule_T)
    dpo_cfg = replace(config.dpo, T=ref_checkpoint.schedule_T)
    prior = ref_checkpoint.prior
    ref_params = ref_checkpoint.params

    by_id = {w.structure.id: w for w in worlds}
    missing = {p.structure_id for p in pairs} - set(by_id)
    if missing:
        raise DomainError(f"pairs reference unknown structures: {sorted(missing)}")
    use_energy = config.loss_mode in ("dpo_energy", "energy_only")
    use_dpo = config.loss_mode in ("dpo_energy", "dpo_only")
    contexts = {}
    if use_energy:
        for sid in {p.structure_id for p in pairs}:
            S = by_id[sid].structure
            if S.num_chains < 2:
                raise DomainError(f"structure '{sid}' has one chain; no unbound "
                                  "decomposition for the energy loss")
            contexts[sid] = (S, unbound_context(S))

    tables = _params_to_dict(ref_checkpoint.params)
    tables["kbt"] = np.asarray(float(ref_checkpoint.kbt))
    opt = OptimizerState.init(tables)

    mode = {"dpo_energy": "full", "dpo_only": "dpo_only", "energy_only": "energy_only"}[config.loss_mode]
    history = []
    for epoch in range(config.epochs):
        order = stream(config.seed, 400, epoch).permutation(len(pairs))
        epoch_losses = []
        batches = [order[i:i + config.batch_size]
                   for i in range(0, len(order), config.batch_size)]
        for b, batch in enumerate(batches):
            batch_pairs = [pairs[i] for i in batch.tolist()]
            draws = [(int(stream(config.seed, 401, epoch, b, i).integers(0, schedule.T)),
                      derive_seed(config.seed, 402, epoch, b, i))
                     for i in range(len(batch_pairs))]
            energy_state = EnergyLossState(kbt=float(tables["kbt"]),
                                           sample_count=config.sample_count,
                                           eval_seed=derive_seed(config.seed, 403, epoch, b))

            def loss_fn(view):
                view_params, kbt_var = view, None
                dpo_term = energy_term = 0.0
                if use_dpo:
                    terms = []
                    for pair, (t, seed) in zip(batch_pairs, draws):
                        S = by_id[pair.structure_id].structure
                        terms.append(bridge_dpo_loss(view_params, ref_params, prior, S,
                                                     pair.winner, pair.loser, t,
                                                     schedule, dpo_cfg, seed))
                    dpo_term = terms[0]
                    for term in terms[1:]:
                        dpo_term = ad.add(dpo_term, term)
                    dpo_term = ad.mul(dpo_term, 1.0 / len(terms))
                if use_energy:
                    kbt_var = getattr(view, "kbt")
                    energy_term = energy_loss(view_params, prior, batch_pairs, contexts,
                                              energy_state, schedule, kbt=kbt_var)
                return total_loss(dpo_term, energy_term, config.total, mode=mode)

            value, grads = grad(loss_fn, tables)
            if not np.isfinite(value):
                raise NumericalError(f"fine-tune loss diverged at epoch {epoch}: {value}")
            grads.setdefault("kbt", np.zeros_like(tables["kbt"]))
            tables, opt = adam_step(tables, grads, opt, config.lr_at(opt.step + 1))
            epoch_losses.append(value)
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                        "kbt": float(tables["kbt"])})

    ckpt = Checkpoint(params=_dict_to_params(tables), prior=prior.copy(),
                      kbt=float(tables["kbt"]), schedule_T=ref_checkpoint.schedule_T,
                      config=_echo(config))
    return ckpt, history


def _echo(config: TrainConfig) -> dict:
    echo = {
        "epochs": config.epochs, "batch_size": config.batch_size,
        "base_lr": config.base_lr, "lr_schedule": config.lr_schedule,
        "warmup": config.warmup, "seed": config.seed,
        "loss_mode": config.loss_mode, "timesteps": config.timesteps,
        "hidden_dim": config.hidden_dim, "sample_count": config.sample_count,
        "patience": config.patience, "prior_epochs": config.prior_epochs,
        "prior_lr": config.prior_lr,
        "beta_dpo": config.dpo.beta_dpo, "omega_mode": config.dpo.omega_mode,
        "lambda_energy": config.total.lambda_energy,
    }
    return echo
