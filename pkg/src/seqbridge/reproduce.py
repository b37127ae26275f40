"""End-to-end desk-scale experiment driver.

Runs every stage through the CLI entry points: world generation,
prior-head training, bridge pretraining (with a single-structure
overfit smoke check first), preference construction, the three
fine-tuning variants (full, without the energy term, without DPO),
sampling, and evaluation.  Emits a deterministic ``report.json`` with
per-criterion pass/fail entries plus all intermediate artifacts;
wall-clock timings go to a separate ``timing.json`` so reports from
identical seeds stay bit-identical.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import io as sbio
from .errors import SeqBridgeError
from .pairing import split_by_structure
from .predictor import prior_encode
from .world import potts_energy

__all__ = ["run_reproduce", "PIPELINE"]

# Desk-scale configuration; paper-scale learning rates and batch sizes
# do not transfer to a model this small, so these values are calibrated
# to the synthetic world (see README).
PIPELINE = {
    "structures": 60,
    "L": "20..60",
    "chains": 2,
    "alphabet": 20,
    "density": 0.15,
    "mutants": 60,
    "max_mutations": 3,
    "anneal_steps": 4000,
    "field_scale": 0.4,
    "coupling_scale": 1.2,
    "split": (28, 6, 26),
    "prior_epochs": 0,
    "pretrain_epochs": 150,
    "pretrain_lr": 2.0,
    "patience": 30,
    "hidden_dim": 48,
    "timesteps": 25,
    "top_frac": 0.3,
    "bottom_frac": 0.3,
    "pairs_per_structure": 54,
    "finetune_epochs": 25,
    "finetune_lr": 1e-3,
    "batch_pairs": 32,
    "beta_dpo": 0.05,
    "lambda_energy": 0.5,
    "sample_count": 4,
    "designs_per_structure": 8,
    "smoke_L": 24,
    "smoke_noise_channels": 16,
    "smoke_epochs": 600,
    "smoke_threshold": 98.0,
}

_MODES = {"full": "dpo_energy", "wo_energy": "dpo_only", "wo_dpo": "energy_only"}


def _run_cli(argv, quiet):
    from .cli import cli

    if quiet:
        argv = list(argv) + ["--quiet"]
    code = cli([str(a) for a in argv])
    if code != 0:
        raise SeqBridgeError(f"pipeline stage failed (exit {code}): {argv[:2]}")


def _write_ids(ids, path):
    Path(path).write_text("".join(i + "\n" for i in ids))


def _smoke_world_seed(base_seed: int, out_dir: Path, quiet: bool) -> tuple:
    """First smoke seed whose untrained prior misses every native token.

    A fully disjoint prior means every position carries training signal,
    which a single-structure overfit needs.
    """
    p = PIPELINE
    for offset in range(64):
        seed = base_seed + 1000 + offset
        world_path = out_dir / "smoke_world.jsonl"
        prior_path = out_dir / "smoke_prior.json"
        _run_cli(["gen-world", "--seed", seed, "--structures", 1,
                  "--L", f"{p['smoke_L']}..{p['smoke_L']}", "--chains", 1,
                  "--noise-channels", p["smoke_noise_channels"],
                  "--anneal-steps", 1500, "--out", world_path], quiet)
        _run_cli(["train-prior", "--world", world_path, "--seed", seed,
                  "--prior-epochs", 0, "--out", prior_path], quiet)
        world = sbio.load_world(world_path)[0]
        prior = sbio.load_checkpoint(prior_path).prior
        if not np.any(prior_encode(prior, world.structure) == world.native):
            return seed, world_path, prior_path
    raise SeqBridgeError("no smoke seed with a fully disjoint prior found")


def _smoke_check(base_seed: int, out_dir: Path, quiet: bool) -> dict:
    p = PIPELINE
    seed, world_path, prior_path = _smoke_world_seed(base_seed, out_dir, quiet)
    ckpt_path = out_dir / "smoke_ckpt.json"
    report_path = out_dir / "smoke_if.json"
    _run_cli(["pretrain", "--world", world_path, "--prior", prior_path,
              "--seed", seed, "--epochs", p["smoke_epochs"], "--val-frac", 0,
              "--hidden-dim", p["hidden_dim"], "--timesteps", p["timesteps"],
              "--out", ckpt_path], quiet)
    _run_cli(["eval-if", "--world", world_path, "--ckpt", ckpt_path,
              "--seed", seed, "--num", 8, "--out", report_path], quiet)
    rec = json.loads(report_path.read_text())["recovery"]["scalars"]["recovery"]
    return {"seed": seed, "recovery": rec, "passed": bool(rec >= p["smoke_threshold"])}


def _paired_energy_stats(world_by_id, designs_ref: dict, designs_model: dict) -> dict:
    diffs = []
    for sid in sorted(designs_ref):
        w = world_by_id[sid]
        e_ref = np.mean([potts_energy(w.structure, w.potts, d)
                         for d in designs_ref[sid]])
        e_model = np.mean([potts_energy(w.structure, w.potts, d)
                           for d in designs_model[sid]])
        diffs.append(e_ref - e_model)
    diffs = np.array(diffs)
    se = float(diffs.std(ddof=1) / np.sqrt(diffs.size))
    return {"mean_improvement": float(diffs.mean()), "standard_error": se,
            "n_structures": int(diffs.size)}


def _load_design_groups(path) -> dict:
    groups = {}
    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                obj = json.loads(raw)
                groups.setdefault(obj["structure_id"], []).append(
                    np.array(obj["tokens"], dtype=np.int64))
    return groups


def run_reproduce(out_dir, seed: int = 7, quiet: bool = False,
                  skip_smoke: bool = False) -> dict:
    """Run the full pipeline; returns the criteria report dict."""
    p = PIPELINE
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}
    t_start = time.time()

    def stage(name, fn):
        t0 = time.time()
        result = fn()
        timing[name] = round(time.time() - t0, 3)
        return result

    world_path = out / "world.jsonl"
    stage("gen_world", lambda: _run_cli(
        ["gen-world", "--seed", seed, "--structures", p["structures"],
         "--L", p["L"], "--chains", p["chains"], "--alphabet", p["alphabet"],
         "--density", p["density"], "--mutants", p["mutants"],
         "--max-mutations", p["max_mutations"], "--anneal-steps", p["anneal_steps"],
         "--field-scale", p["field_scale"], "--coupling-scale", p["coupling_scale"],
         "--out", world_path], quiet))

    worlds = sbio.load_world(world_path)
    ids = [w.structure.id for w in worlds]
    n = len(ids)
    n_train, n_val, n_test = p["split"]
    fractions = (n_train / n, n_val / n, 1.0 - n_train / n - n_val / n)
    train_ids, val_ids, test_ids = split_by_structure(ids, fractions, seed)
    assert len(test_ids) == n_test, (len(train_ids), len(val_ids), len(test_ids))
    _write_ids(train_ids, out / "train_ids.txt")
    _write_ids(val_ids, out / "val_ids.txt")
    _write_ids(test_ids, out / "test_ids.txt")
    world_by_id = {w.structure.id: w for w in worlds}

    report = {"seed": seed, "criteria": {}, "artifacts": {}}

    if not skip_smoke:
        smoke = stage("smoke", lambda: _smoke_check(seed, out, quiet))
        report["criteria"]["smoke_overfit"] = {
            "passed": smoke["passed"],
            "recovery": smoke["recovery"],
            "threshold": p["smoke_threshold"],
            "statement": "1-structure overfit recovery >= 98%",
        }

    prior_path = out / "prior.json"
    stage("train_prior", lambda: _run_cli(
        ["train-prior", "--world", world_path, "--ids", out / "train_ids.txt",
         "--seed", seed, "--prior-epochs", p["prior_epochs"], "--out", prior_path], quiet))

    ref_path = out / "ckpt_ref.json"
    stage("pretrain", lambda: _run_cli(
        ["pretrain", "--world", world_path, "--prior", prior_path,
         "--ids", out / "train_ids.txt", "--val-ids", out / "val_ids.txt",
         "--seed", seed, "--epochs", p["pretrain_epochs"],
         "--base-lr", p["pretrain_lr"], "--timesteps", p["timesteps"],
         "--hidden-dim", p["hidden_dim"], "--out", ref_path], quiet))

    pairs_path = out / "pairs.jsonl"
    stage("make_prefs", lambda: _run_cli(
        ["make-prefs", "--world", world_path, "--ids", out / "train_ids.txt",
         "--seed", seed, "--top-frac", p["top_frac"],
         "--bottom-frac", p["bottom_frac"],
         "--pairs-per-structure", p["pairs_per_structure"],
         "--out", pairs_path], quiet))

    ckpts = {"ref": ref_path}
    for name, mode in _MODES.items():
        path = out / f"ckpt_{name}.json"
        stage(f"finetune_{name}", lambda path=path, mode=mode: _run_cli(
            ["finetune", "--world", world_path, "--pairs", pairs_path,
             "--ref", ref_path, "--mode", mode, "--seed", seed,
             "--epochs", p["finetune_epochs"], "--base-lr", p["finetune_lr"],
             "--batch-pairs", p["batch_pairs"], "--beta-dpo", p["beta_dpo"],
             "--lambda-energy", p["lambda_energy"],
             "--sample-count", p["sample_count"], "--out", path], quiet))
        ckpts[name] = path

    designs, if_reports = {}, {}
    for name, path in ckpts.items():
        design_path = out / f"designs_{name}.jsonl"
        stage(f"sample_{name}", lambda path=path, dp=design_path: _run_cli(
            ["sample", "--world", world_path, "--ids", out / "test_ids.txt",
             "--ckpt", path, "--seed", seed, "--num", p["designs_per_structure"],
             "--out", dp], quiet))
        designs[name] = _load_design_groups(design_path)
        if_path = out / f"if_{name}.json"
        stage(f"eval_if_{name}", lambda path=path, ip=if_path: _run_cli(
            ["eval-if", "--world", world_path, "--ids", out / "test_ids.txt",
             "--ckpt", path, "--seed", seed, "--num", p["designs_per_structure"],
             "--out", ip], quiet))
        if_reports[name] = json.loads(if_path.read_text())

    ddg_reports = {}
    for name in ("full", "wo_energy"):
        ddg_path = out / f"ddg_{name}.json"
        stage(f"eval_ddg_{name}", lambda name=name, dp=ddg_path: _run_cli(
            ["eval-ddg", "--world", world_path, "--ids", out / "test_ids.txt",
             "--ckpt", ckpts[name], "--seed", seed + 99, "--out", dp], quiet))
        ddg_reports[name] = json.loads(ddg_path.read_text())

    stage("eval_energy", lambda: _run_cli(
        ["eval-energy", "--world", world_path, "--ids", out / "test_ids.txt",
         "--target", "full", "--csv", out / "energy_table.csv",
         "--out", out / "energy_table.json"]
        + [x for name in ckpts for x in
           ("--designs", f"{name}={out / f'designs_{name}.jsonl'}")], quiet))

    energy_stats = _paired_energy_stats(world_by_id, designs["ref"], designs["full"])
    report["criteria"]["energy_direction"] = {
        "passed": bool(energy_stats["mean_improvement"]
                       > 2.0 * energy_stats["standard_error"]),
        **energy_stats,
        "statement": "fine-tuned designs beat the reference mean oracle energy "
                     "by more than twice the paired standard error",
    }

    rec = {name: r["recovery"]["scalars"]["recovery"]
           for name, r in if_reports.items()}
    report["criteria"]["recovery_preserved"] = {
        "passed": bool(abs(rec["full"] - rec["ref"]) <= 5.0),
        "reference": rec["ref"], "fine_tuned": rec["full"],
        "difference": abs(rec["full"] - rec["ref"]),
        "statement": "median recovery within 5 points of the reference",
    }

    sp_full = ddg_reports["full"]["scalars"].get("spearman")
    au_full = ddg_reports["full"]["scalars"].get("auroc")
    sp_ablate = ddg_reports["wo_energy"]["scalars"].get("spearman")
    ok7 = (sp_full is not None and au_full is not None and sp_ablate is not None
           and sp_full >= 0.5 and au_full >= 0.7 and sp_ablate < sp_full)
    report["criteria"]["ddg_ranking"] = {
        "passed": bool(ok7),
        "spearman": sp_full, "auroc": au_full,
        "spearman_wo_energy": sp_ablate,
        "statement": "held-out ddG spearman >= 0.5, auroc >= 0.7, and the "
                     "no-energy ablation ranks strictly worse",
    }

    report["criteria"]["ablation_structure"] = {
        "passed": bool(rec["wo_dpo"] < rec["full"]),
        "recovery_full": rec["full"], "recovery_wo_dpo": rec["wo_dpo"],
        "recovery_wo_energy": rec["wo_energy"],
        "statement": "the no-DPO ablation recovers strictly less than the full model",
    }

    report["recovery"] = rec
    report["energy_table"] = json.loads((out / "energy_table.json").read_text())
    report["checkpoint_hashes"] = {
        name: json.loads(Path(path).read_text())["hash"]
        for name, path in ckpts.items()
    }
    report["artifacts"] = {name: str(path.name) for name, path in ckpts.items()}

    sbio.save_json(report, out / "report.json")
    timing["total"] = round(time.time() - t_start, 3)
    sbio.save_json(timing, out / "timing.json")
    return report
