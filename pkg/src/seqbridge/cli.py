"""Command-line surface.

Subcommands cover the full experiment: gen-world, train-prior,
pretrain, make-prefs, finetune, sample, eval-if, eval-ddg, eval-energy,
and reproduce.  Flags override values from an optional JSON config
file, which overrides built-in defaults.  Exit codes: 0 success,
1 usage or configuration problem, 2 data problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sbio
from .bridge import make_cosine_schedule, reverse_sample
from .errors import (ConfigError, DataError, DegenerateInputError, DomainError,
                     NumericalError, PairingError, SeqBridgeError, ShapeError)
from .metrics import ddg_metrics, energy_table, perplexity, recovery, zscore
from .objectives import DpoConfig, EnergyLossState, TotalLossConfig, ddg_predict
from .pairing import PairingConfig, build_pairs, split_by_structure
from .predictor import predict, prior_encode
from .rng import derive_seed
from .training import (Checkpoint, TrainConfig, dpo_finetune, init_params,
                       pretrain, train_prior_head)
from .world import PreferencePair, make_world, unbound_context
from . import autodiff as ad

__all__ = ["main", "cli"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to 1."""

    def error(self, message):
        raise _UsageError(message)


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--config", type=str, default=None, help="JSON config file")
    sub.add_argument("--out", type=str, required=True, help="output path")
    sub.add_argument("--quiet", action="store_true", help="suppress progress output")


def _build_parser() -> _Parser:
    parser = _Parser(prog="seqbridge", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-world", parents=[], help="generate a synthetic world")
    _add_common(p)
    p.add_argument("--structures", type=int, default=60)
    p.add_argument("--L", type=str, default="20..60", help="length range lo..hi")
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--alphabet", type=int, default=20)
    p.add_argument("--density", type=float, default=0.15)
    p.add_argument("--mutants", type=int, default=60)
    p.add_argument("--max-mutations", type=int, default=3)
    p.add_argument("--anneal-steps", type=int, default=4000)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--noise-channels", type=int, default=6)
    p.add_argument("--field-scale", type=float, default=0.4)
    p.add_argument("--coupling-scale", type=float, default=1.2)

    p = subs.add_parser("train-prior", help="train the frozen prior head")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ids", type=str, default=None, help="file of structure ids to use")
    p.add_argument("--prior-epochs", type=int, default=None)

    p = subs.add_parser("pretrain", help="bridge pretraining from a prior head")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--prior", type=str, required=True, help="checkpoint holding the prior head")
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--val-ids", type=str, default=None,
                   help="explicit validation ids (overrides --val-frac)")
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)

    p = subs.add_parser("make-prefs", help="build preference pairs from mutant scores")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--scores", type=str, default=None,
                   help="external CSV/JSONL scores instead of world mutants")
    p.add_argument("--top-frac", type=float, default=0.3)
    p.add_argument("--bottom-frac", type=float, default=0.3)
    p.add_argument("--pairs-per-structure", type=int, default=54)

    p = subs.add_parser("finetune", help="preference fine-tuning with ablation modes")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--pairs", type=str, required=True)
    p.add_argument("--ref", type=str, required=True)
    p.add_argument("--mode", type=str, default="dpo_energy",
                   choices=["dpo_energy", "dpo_only", "energy_only"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--batch-pairs", type=int, default=None)
    p.add_argument("--beta-dpo", type=float, default=None)
    p.add_argument("--lambda-energy", type=float, default=None)
    p.add_argument("--sample-count", type=int, default=None)

    p = subs.add_parser("sample", help="reverse-sample designs for structures")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--num", type=int, default=8, help="designs per structure")

    p = subs.add_parser("eval-if", help="inverse-folding metrics: recovery, perplexity")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--num", type=int, default=8)

    p = subs.add_parser("eval-ddg", help="ddG ranking metrics on mutant libraries")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--sample-count", type=int, default=8)

    p = subs.add_parser("eval-energy", help="oracle-energy table over design files")
    _add_common(p)
    p.add_argument("--world", type=str, required=True)
    p.add_argument("--ids", type=str, default=None)
    p.add_argument("--designs", type=str, action="append", required=True,
                   metavar="NAME=PATH", help="named design file (repeatable)")
    p.add_argument("--target", type=str, default=None,
                   help="model name scored by the cross-method standardized score")
    p.add_argument("--csv", type=str, default=None, help="also emit a CSV table")

    p = subs.add_parser("reproduce", help="run the full desk-scale experiment")
    _add_common(p)
    p.add_argument("--skip-smoke", action="store_true",
                   help="skip the single-structure overfit check")

    return parser


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def _setting(args, file_cfg: dict, name: str, default):
    """Precedence: CLI flag > config file > default."""
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return flag
    if name in file_cfg:
        return file_cfg[name]
    return default


def _say(args, message: str):
    if not args.quiet:
        print(message, file=sys.stderr)


def _read_ids(path) -> list | None:
    if path is None:
        return None
    try:
        return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    except FileNotFoundError:
        raise DataError(f"ids file not found: {path}") from None


def _select_worlds(worlds, ids):
    if ids is None:
        return worlds
    by_id = {w.structure.id: w for w in worlds}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"ids not present in world file: {missing}")
    return [by_id[i] for i in ids]


def _parse_range(text: str) -> tuple:
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"length range must look like 20..60, got '{text}'") from None


def _cmd_gen_world(args, cfg):
    seed = _setting(args, cfg, "seed", 7)
    records = make_world(seed=seed, n_structures=args.structures,
                         L_range=_parse_range(args.L), num_chains=args.chains,
                         K=args.alphabet, contact_density=args.density,
                         n_mutants=args.mutants, max_mutations=args.max_mutations,
                         anneal_steps=args.anneal_steps, num_classes=args.classes,
                         noise_channels=args.noise_channels,
                         field_scale=args.field_scale,
                         coupling_scale=args.coupling_scale)
    sbio.save_world(records, args.out)
    _say(args, f"wrote {len(records)} structures to {args.out}")


def _train_config(args, cfg, seed, **overrides) -> TrainConfig:
    fields = {
        "epochs": _setting(args, cfg, "epochs", 150),
        "batch_size": cfg.get("batch_size", 2000),
        "base_lr": _setting(args, cfg, "base_lr", 2.0),
        "lr_schedule": cfg.get("lr_schedule", "noam"),
        "warmup": cfg.get("warmup", 150),
        "seed": seed,
        "timesteps": _setting(args, cfg, "timesteps", 25),
        "hidden_dim": _setting(args, cfg, "hidden_dim", 48),
        "sample_count": _setting(args, cfg, "sample_count", 4),
        "patience": cfg.get("patience", 30),
        "prior_epochs": _setting(args, cfg, "prior_epochs", 0),
        "prior_lr": cfg.get("prior_lr", 0.05),
    }
    fields.update(overrides)
    dpo = DpoConfig(beta_dpo=_setting(args, cfg, "beta_dpo", 0.05),
                    T=fields["timesteps"],
                    omega_mode=cfg.get("omega_mode", "constant"))
    total = TotalLossConfig(lambda_energy=_setting(args, cfg, "lambda_energy", 0.5))
    return TrainConfig(dpo=dpo, total=total, **fields)


def _cmd_train_prior(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    seed = _setting(args, cfg, "seed", 0)
    config = _train_config(args, cfg, seed)
    prior = train_prior_head(worlds, config)
    K = worlds[0].potts.K
    f = worlds[0].structure.feature_width
    ckpt = Checkpoint(params=init_params(derive_seed(seed, 1), config.hidden_dim, K,
                                         config.timesteps, f),
                      prior=prior, kbt=1.0, schedule_T=config.timesteps,
                      config={"stage": "prior", "seed": seed,
                              "prior_epochs": config.prior_epochs})
    digest = sbio.save_checkpoint(ckpt, args.out)
    _say(args, f"trained prior head on {len(worlds)} structures -> {args.out} ({digest[:15]})")


def _cmd_pretrain(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    prior_ckpt = sbio.load_checkpoint(args.prior)
    seed = _setting(args, cfg, "seed", 0)
    config = _train_config(args, cfg, seed, loss_mode="pretrain")
    if args.val_ids is not None:
        all_worlds = sbio.load_world(args.world)
        train, val = worlds, _select_worlds(all_worlds, _read_ids(args.val_ids))
    elif args.val_frac > 0 and len(worlds) > 2:
        ids = [w.structure.id for w in worlds]
        train_ids, val_ids, _ = split_by_structure(
            ids, (1.0 - args.val_frac, args.val_frac, 0.0), derive_seed(seed, 2))
        train = _select_worlds(worlds, train_ids)
        val = _select_worlds(worlds, val_ids)
    else:
        train, val = worlds, []
    ckpt, history = pretrain(train, val, config, prior_ckpt.prior)
    digest = sbio.save_checkpoint(ckpt, args.out)
    sbio.save_json(history, str(args.out) + ".history.json")
    _say(args, f"pretrained {len(history)} epochs -> {args.out} ({digest[:15]})")


def _cmd_make_prefs(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    seed = _setting(args, cfg, "seed", 0)
    if args.scores is not None:
        records = sbio.load_external_scores(args.scores)
        groups = {}
        for rec in records:
            groups.setdefault(rec.structure_id, []).append(rec)
    else:
        groups = {w.structure.id: w.mutants for w in worlds}
    pairs = []
    for idx, sid in enumerate(sorted(groups)):
        pc = PairingConfig(top_frac=args.top_frac, bottom_frac=args.bottom_frac,
                           pairs_per_structure=args.pairs_per_structure,
                           seed=derive_seed(seed, 3, idx))
        pairs.extend(build_pairs(groups[sid], pc))
    sbio.save_pairs(pairs, args.out)
    _say(args, f"wrote {len(pairs)} pairs over {len(groups)} structures to {args.out}")


def _cmd_finetune(args, cfg):
    worlds = sbio.load_world(args.world)
    pairs = sbio.load_pairs(args.pairs, worlds)
    ref = sbio.load_checkpoint(args.ref)
    seed = _setting(args, cfg, "seed", 0)
    config = _train_config(args, cfg, seed, loss_mode=args.mode,
                           epochs=_setting(args, cfg, "epochs", 25),
                           base_lr=_setting(args, cfg, "base_lr", 1e-3),
                           lr_schedule="constant",
                           batch_size=_setting(args, cfg, "batch_pairs", 32),
                           timesteps=ref.schedule_T,
                           hidden_dim=ref.params.d)
    ckpt, history = dpo_finetune(worlds, pairs, ref, config)
    digest = sbio.save_checkpoint(ckpt, args.out)
    sbio.save_json(history, str(args.out) + ".history.json")
    _say(args, f"fine-tuned ({args.mode}) {len(history)} epochs -> {args.out} ({digest[:15]})")


def _designs_for(ckpt: Checkpoint, worlds, num: int, seed: int):
    schedule = ckpt.schedule()
    for w in worlds:
        for j in range(num):
            tokens = reverse_sample(
                lambda z, S, t: predict(ckpt.params, z, S, t),
                lambda S: prior_encode(ckpt.prior, S),
                w.structure, schedule, derive_seed(seed, 5, j), ckpt.params.K)
            yield w, j, tokens


def _cmd_sample(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    ckpt = sbio.load_checkpoint(args.ckpt)
    seed = _setting(args, cfg, "seed", 0)
    with open(args.out, "w") as fh:
        for w, j, tokens in _designs_for(ckpt, worlds, args.num, seed):
            row = {"structure_id": w.structure.id, "design_index": j,
                   "tokens": tokens.tolist()}
            if ckpt.params.K == len(sbio.ALPHABET):
                row["sequence"] = sbio.tokens_to_sequence(tokens)
            fh.write(json.dumps(row) + "\n")
    _say(args, f"sampled {args.num} designs per structure to {args.out}")


def _cmd_eval_if(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    ckpt = sbio.load_checkpoint(args.ckpt)
    seed = _setting(args, cfg, "seed", 0)
    schedule = ckpt.schedule()
    rec = recovery(ckpt.params, ckpt.prior, worlds, schedule,
                   seeds=[derive_seed(seed, 5, j) for j in range(args.num)])
    ppl = perplexity(ckpt.params, ckpt.prior, worlds, schedule,
                     eval_seed=derive_seed(seed, 6))
    report = {"recovery": rec.to_dict(), "perplexity": ppl.to_dict()}
    sbio.save_json(report, args.out)
    _say(args, f"recovery {rec.scalars['recovery']:.2f}%  "
               f"perplexity {ppl.scalars['perplexity']:.3f} -> {args.out}")


def _ddg_eval(ckpt: Checkpoint, worlds, sample_count: int, seed: int):
    schedule = ckpt.schedule()
    state = EnergyLossState(kbt=ckpt.kbt, sample_count=sample_count, eval_seed=seed)
    preds, labels, groups = [], [], []
    for w in worlds:
        contexts = {w.structure.id: (w.structure, unbound_context(w.structure))}
        for m in w.mutants:
            pair = PreferencePair(w.structure.id, w.native, m.tokens, m.ddg_vs_native)
            preds.append(float(ad.value_of(ddg_predict(
                ckpt.params, ckpt.prior, pair, contexts, state, schedule))))
            labels.append(m.ddg_vs_native)
            groups.append(w.structure.id)
    return ddg_metrics(preds, labels, groups)


def _cmd_eval_ddg(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    ckpt = sbio.load_checkpoint(args.ckpt)
    seed = _setting(args, cfg, "seed", 99)
    report = _ddg_eval(ckpt, worlds, args.sample_count, seed)
    sbio.save_json(report.to_dict(), args.out)
    sp = report.scalars.get("spearman")
    au = report.scalars.get("auroc")
    _say(args, f"ddG spearman {sp if sp is None else round(sp, 4)}  "
               f"auroc {au if au is None else round(au, 4)} -> {args.out}")


def _load_designs_file(path, worlds):
    by_id = {w.structure.id: w for w in worlds}
    per_structure = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
                sid = obj["structure_id"]
                if sid not in by_id:
                    raise DataError(f"unknown structure id '{sid}'")
                per_structure.setdefault(sid, []).append(
                    np.array(obj["tokens"], dtype=np.int64))
            except DataError as exc:
                raise DataError(str(exc), line=lineno) from None
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"invalid design row: {exc}", line=lineno) from None
    missing = set(by_id) - set(per_structure)
    if missing:
        raise DataError(f"design file {path} lacks structures: {sorted(missing)}")
    return per_structure


def _cmd_eval_energy(args, cfg):
    worlds = _select_worlds(sbio.load_world(args.world), _read_ids(args.ids))
    named = {}
    for spec_item in args.designs:
        if "=" not in spec_item:
            raise ConfigError(f"--designs expects NAME=PATH, got '{spec_item}'")
        name, path = spec_item.split("=", 1)
        per_structure = _load_designs_file(path, worlds)
        expanded_worlds, expanded = [], []
        for w in worlds:
            for tokens in per_structure[w.structure.id]:
                expanded_worlds.append(w)
                expanded.append(tokens)
        named[name] = (expanded_worlds, expanded)
    table = {name: energy_table({name: seqs}, ws)[name]
             for name, (ws, seqs) in named.items()}
    report = {"models": table}
    names = sorted(table)
    if args.target is not None and len(names) >= 2:
        if args.target not in table:
            raise ConfigError(f"--target '{args.target}' not among design names")
        matrix = np.array([[table[n]["mean"], table[n]["std"]] for n in names])
        report["zscore"] = {"target": args.target,
                            "value": zscore(matrix, names.index(args.target)),
                            "models": names}
    sbio.save_json(report, args.out)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("model,mean,std,n\n")
            for name in names:
                row = table[name]
                fh.write(f"{name},{row['mean']!r},{row['std']!r},{row['n']}\n")
    _say(args, f"energy table for {len(names)} models -> {args.out}")


def _cmd_reproduce(args, cfg):
    from .reproduce import run_reproduce

    seed = _setting(args, cfg, "seed", 7)
    report = run_reproduce(args.out, seed=seed, quiet=args.quiet,
                           skip_smoke=args.skip_smoke)
    failed = [name for name, entry in report["criteria"].items() if not entry["passed"]]
    _say(args, f"reproduce finished; report at {Path(args.out) / 'report.json'}")
    if failed:
        _say(args, f"FAILED criteria: {failed}")
        return 2
    return 0


_COMMANDS = {
    "gen-world": _cmd_gen_world,
    "train-prior": _cmd_train_prior,
    "pretrain": _cmd_pretrain,
    "make-prefs": _cmd_make_prefs,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "eval-if": _cmd_eval_if,
    "eval-ddg": _cmd_eval_ddg,
    "eval-energy": _cmd_eval_energy,
    "reproduce": _cmd_reproduce,
}


def cli(argv) -> int:
    """Run one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args.config)
        result = _COMMANDS[args.command](args, cfg)
        return int(result) if result is not None else 0
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError, DomainError, PairingError,
            DegenerateInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except SeqBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
