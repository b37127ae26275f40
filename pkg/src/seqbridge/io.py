"""Dataset and checkpoint persistence.

Worlds and preference pairs travel as JSONL (one record per line, all
numbers decimal with round-trip precision); checkpoints are single
JSON documents carrying a content hash that is verified on load.
Coupling tables are stored through a deduplicated pool, so worlds with
a shared interaction table stay compact.

Sequence strings use the fixed 20-letter amino-acid alphabet in
alphabetical order, so token indices are portable.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataError, VersionError
from .predictor import PARAM_TABLES, PredictorParams, PriorHeadParams
from .training import CHECKPOINT_VERSION, Checkpoint
from .world import (MutantRecord, PottsEnergyModel, PreferencePair,
                    StructureContext, WorldRecord)

__all__ = [
    "ALPHABET",
    "tokens_to_sequence",
    "sequence_to_tokens",
    "save_checkpoint",
    "load_checkpoint",
    "save_world",
    "load_world",
    "save_pairs",
    "load_pairs",
    "load_external_scores",
    "save_json",
]

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
_TOKEN_OF = {ch: i for i, ch in enumerate(ALPHABET)}


def tokens_to_sequence(tokens) -> str:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= len(ALPHABET)):
        raise DataError(f"token outside the {len(ALPHABET)}-letter alphabet")
    return "".join(ALPHABET[t] for t in toks)


def sequence_to_tokens(seq: str) -> np.ndarray:
    try:
        return np.array([_TOKEN_OF[ch] for ch in seq.strip().upper()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"unknown residue letter {exc.args[0]!r}") from None


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _payload_hash(payload: dict) -> str:
    return "sha256:" + hashlib.sha256(_canonical(payload).encode()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write a checkpoint as hashed JSON; returns the content hash."""
    payload = {
        "format_version": ckpt.version,
        "schedule": {"kind": "cosine", "T": ckpt.schedule_T},
        "kbt": float(ckpt.kbt),
        "params": {n: getattr(ckpt.params, n).tolist() for n in PARAM_TABLES},
        "prior": {"proj": ckpt.prior.proj.tolist(), "bias": ckpt.prior.bias.tolist()},
        "config": ckpt.config,
    }
    digest = _payload_hash(payload)
    payload["hash"] = digest
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return digest


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint; hash or version problems raise."""
    try:
        payload = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "hash" not in payload:
        raise CorruptionError(f"checkpoint {path} lacks a content hash")
    stored = payload.pop("hash")
    if _payload_hash(payload) != stored:
        raise CorruptionError(f"checkpoint {path} failed hash verification")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version!r} not supported")
    params = PredictorParams(**{n: np.array(payload["params"][n], dtype=np.float64)
                                for n in PARAM_TABLES})
    prior = PriorHeadParams(proj=np.array(payload["prior"]["proj"], dtype=np.float64),
                            bias=np.array(payload["prior"]["bias"], dtype=np.float64))
    return Checkpoint(params=params, prior=prior, kbt=float(payload["kbt"]),
                      schedule_T=int(payload["schedule"]["T"]),
                      config=payload.get("config", {}), version=version)


def _structure_to_json(S: StructureContext) -> dict:
    return {"id": S.id, "L": S.L, "chains": S.chain_of.tolist(),
            "contacts": [[int(i), int(j)] for i, j in S.contact_pairs()],
            "features": S.features.tolist()}


def _structure_from_json(obj: dict) -> StructureContext:
    L = int(obj["L"])
    contacts = np.zeros((L, L), dtype=bool)
    for pair in obj["contacts"]:
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < j < L):
            raise DataError(f"contact pair ({i}, {j}) violates 0 <= i < j < L")
        contacts[i, j] = contacts[j, i] = True
    return StructureContext(id=str(obj["id"]), L=L, contacts=contacts,
                            chain_of=np.array(obj["chains"], dtype=np.int64),
                            features=np.array(obj["features"], dtype=np.float64))


def save_world(records, path) -> None:
    """One JSONL line per structure; coupling tables are pooled."""
    with open(path, "w") as fh:
        for rec in records:
            tables, index, entries = [], {}, []
            for (i, j) in rec.structure.contact_pairs():
                table = rec.potts.J[(i, j)]
                key = table.tobytes()
                if key not in index:
                    index[key] = len(tables)
                    tables.append(table.tolist())
                entries.append([i, j, index[key]])
            line = {
                "structure": _structure_to_json(rec.structure),
                "potts": {"h": rec.potts.h.tolist(),
                          "J": {"tables": tables, "entries": entries}},
                "native": rec.native.tolist(),
                "mutants": [{"structure_id": m.structure_id,
                             "tokens": m.tokens.tolist(),
                             "score": m.score,
                             "ddg_vs_native": m.ddg_vs_native}
                            for m in rec.mutants],
            }
            fh.write(json.dumps(line) + "\n")


def load_world(path) -> list:
    """Parse and validate a world file; errors carry the line number."""
    records = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
                S = _structure_from_json(obj["structure"])
                h = np.array(obj["potts"]["h"], dtype=np.float64)
                tables = [np.array(t, dtype=np.float64)
                          for t in obj["potts"]["J"]["tables"]]
                J = {}
                for i, j, tidx in obj["potts"]["J"]["entries"]:
                    J[(int(i), int(j))] = tables[int(tidx)]
                potts = PottsEnergyModel(h=h, J=J)
                if set(J) != set(S.contact_pairs()):
                    raise DataError("coupling entries do not match the contact map")
                if h.shape[0] != S.L:
                    raise DataError(f"field table rows {h.shape[0]} != L {S.L}")
                K = h.shape[1]
                native = _checked_tokens(obj["native"], S.L, K, "native")
                mutants = []
                for m in obj.get("mutants", []):
                    if m["structure_id"] != S.id:
                        raise DataError(f"mutant references '{m['structure_id']}' "
                                        f"inside structure '{S.id}'")
                    mutants.append(MutantRecord(
                        structure_id=S.id,
                        tokens=_checked_tokens(m["tokens"], S.L, K, "mutant"),
                        score=float(m["score"]),
                        ddg_vs_native=float(m["ddg_vs_native"])))
                records.append(WorldRecord(structure=S, potts=potts,
                                           native=native, mutants=mutants))
            except DataError as exc:
                raise DataError(str(exc), line=lineno) from None
            except Exception as exc:
                raise DataError(f"invalid world record: {exc}", line=lineno) from None
    if not records:
        raise DataError(f"world file {path} contains no records")
    return records


def _checked_tokens(values, L: int, K: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.int64)
    if arr.shape != (L,):
        raise DataError(f"{what} tokens have shape {arr.shape}, expected ({L},)")
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise DataError(f"{what} tokens outside [0, {K})")
    return arr


def save_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"structure_id": p.structure_id,
                                 "winner": p.winner.tolist(),
                                 "loser": p.loser.tolist(),
                                 "ddg_label": p.ddg_label}) + "\n")


def load_pairs(path, worlds=None) -> list:
    """Load preference pairs; validates ids and tokens against ``worlds``."""
    by_id = {w.structure.id: w for w in worlds} if worlds is not None else None
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
                sid = str(obj["structure_id"])
                if by_id is not None:
                    if sid not in by_id:
                        raise DataError(f"unknown structure id '{sid}'")
                    L = by_id[sid].structure.L
                    K = by_id[sid].potts.K
                    winner = _checked_tokens(obj["winner"], L, K, "winner")
                    loser = _checked_tokens(obj["loser"], L, K, "loser")
                else:
                    winner = np.array(obj["winner"], dtype=np.int64)
                    loser = np.array(obj["loser"], dtype=np.int64)
                pairs.append(PreferencePair(structure_id=sid, winner=winner,
                                            loser=loser,
                                            ddg_label=float(obj["ddg_label"])))
            except DataError as exc:
                raise DataError(str(exc), line=lineno) from None
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"invalid pair record: {exc}", line=lineno) from None
    return pairs


def load_external_scores(path) -> list:
    """Scored mutants from CSV or JSONL produced outside the pipeline.

    Expected fields: structure_id, sequence (letters) or tokens, score,
    higher_is_better.  Scores with higher_is_better set are negated so
    the pipeline's lower-is-better convention holds throughout.
    """
    path = Path(path)
    rows = _read_csv_rows(path) if path.suffix.lower() == ".csv" else _read_jsonl_rows(path)
    records = []
    for lineno, row in rows:
        try:
            sid = str(row["structure_id"])
            if row.get("sequence"):
                tokens = sequence_to_tokens(str(row["sequence"]))
            elif row.get("tokens") is not None:
                raw = row["tokens"]
                if isinstance(raw, str):
                    raw = [int(x) for x in raw.replace(",", " ").split()]
                tokens = np.array(raw, dtype=np.int64)
            else:
                raise DataError("row needs a 'sequence' or 'tokens' field")
            score = float(row["score"])
            if _truthy(row.get("higher_is_better", False)):
                score = -score
            records.append(MutantRecord(structure_id=sid, tokens=tokens,
                                        score=score, ddg_vs_native=score))
        except DataError as exc:
            raise DataError(str(exc), line=lineno) from None
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"invalid score row: {exc}", line=lineno) from None
    if not records:
        raise DataError(f"score file {path} contains no rows")
    return records


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "y")
    return bool(value)


def _read_csv_rows(path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path} has no header row", line=1)
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def _read_jsonl_rows(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc}", line=lineno) from None


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
