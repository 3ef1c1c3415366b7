"""MUSHRA test definitions, the rating journal, and score aggregation.

A test definition is plain JSON (schema in ``schemas/mushra_test.schema.json``).
Condition labels live only in the definition; raters see opaque tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import secrets
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_ID = "bwe-mushra-test/1"
HIDDEN_REFERENCE = "hidden_reference"
Z_95 = 1.96


class MushraError(Exception):
    pass


class UnknownTestError(MushraError):
    pass


class UnknownSessionError(MushraError):
    pass


class ValidationError(MushraError):
    def __init__(self, message: str, token: str | None = None):
        super().__init__(message)
        self.token = token


class AlreadySubmittedError(MushraError):
    pass


def _new_token() -> str:
    return secrets.token_urlsafe(12)


def _wav_files(directory) -> dict[str, Path]:
    return {p.stem: p for p in sorted(Path(directory).glob("*.wav"))}


def prepare_test(
    ref_dir,
    cond_dirs: Sequence[tuple[str, str]],
    anchor: str,
    test_id: str | None = None,
    hidden_reference_label: str = HIDDEN_REFERENCE,
    utterances: Iterable[str] | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Build a test definition from a reference directory and labelled condition directories.

    Each trial gets the labelled reference plus one blind stimulus per
    condition, with the hidden reference added automatically. Files are
    matched across directories by stem.
    """
    labels = [label for label, _ in cond_dirs]
    seen = set()
    for label in labels + [hidden_reference_label]:
        if label in seen:
            raise ValidationError(f"duplicate condition label {label!r}")
        seen.add(label)
    if anchor not in labels:
        raise ValidationError(f"anchor {anchor!r} is not one of the condition labels {labels}")

    refs = _wav_files(ref_dir)
    if not refs:
        raise ValidationError(f"no reference WAV files in {ref_dir}")
    wanted = sorted(utterances) if utterances is not None else sorted(refs)
    per_cond = {label: _wav_files(d) for label, d in cond_dirs}
    for utt in wanted:
        if utt not in refs:
            raise ValidationError(f"utterance {utt!r} has no reference file")
        for label, files in per_cond.items():
            if utt not in files:
                raise ValidationError(f"condition {label!r} has no file for utterance {utt!r}")

    rng = rng or np.random.default_rng()
    trials = []
    for i, utt in enumerate(wanted):
        stimuli = [{"token": _new_token(), "condition": hidden_reference_label, "path": str(refs[utt].resolve())}]
        for label, files in per_cond.items():
            stimuli.append({"token": _new_token(), "condition": label, "path": str(files[utt].resolve())})
        order = rng.permutation(len(stimuli))
        trials.append({
            "trial_id": f"trial{i:03d}",
            "utterance_id": utt,
            "reference": {"token": _new_token(), "path": str(refs[utt].resolve())},
            "stimuli": [stimuli[j] for j in order],
        })
    definition = {
        "schema": SCHEMA_ID,
        "test_id": test_id or uuid.uuid4().hex[:12],
        "conditions": [hidden_reference_label] + labels,
        "hidden_reference": hidden_reference_label,
        "anchor": anchor,
        "trials": trials,
    }
    validate_definition(definition)
    return definition


def validate_definition(d: Mapping) -> None:
    for key in ("schema", "test_id", "conditions", "hidden_reference", "anchor", "trials"):
        if key not in d:
            raise ValidationError(f"test definition lacks {key!r}")
    if d["schema"] != SCHEMA_ID:
        raise ValidationError(f"unsupported definition schema {d['schema']!r}")
    conditions = list(d["conditions"])
    if len(set(conditions)) != len(conditions):
        raise ValidationError("duplicate condition labels")
    tokens = set()
    for trial in d["trials"]:
        ref_token = trial["reference"]["token"]
        blind = trial["stimuli"]
        trial_conditions = [s["condition"] for s in blind]
        if trial_conditions.count(d["hidden_reference"]) != 1 or trial_conditions.count(d["anchor"]) != 1:
            raise ValidationError(f"trial {trial['trial_id']} needs exactly one hidden reference and one anchor")
        for tok in [ref_token] + [s["token"] for s in blind]:
            if tok in tokens:
                raise ValidationError("stimulus tokens must be unique across the test")
            tokens.add(tok)
        for s in blind:
            if s["condition"] not in conditions:
                raise ValidationError(f"trial {trial['trial_id']} uses an undeclared condition")


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class ScreeningRule:
    """Flag raters whose hidden-reference score is below ``threshold`` on too many trials."""

    threshold: int = 90
    max_fraction: float = 0.15


def _stats(values: Sequence[float]) -> dict:
    n = len(values)
    mean = float(np.mean(values))
    half = None
    if n > 1:
        half = Z_95 * float(np.std(values, ddof=1)) / math.sqrt(n)
    return {"mean": mean, "count": n, "ci95_half_width": half}


def aggregate(definition: Mapping, ratings: Iterable[Mapping], screening: ScreeningRule | None = None) -> dict:
    """Per-condition means with normal-approximation 95% intervals.

    With ``screening`` set, flagged raters are excluded from the main table
    and summarised separately under ``flagged``.
    """
    token_condition = {}
    for trial in definition["trials"]:
        for s in trial["stimuli"]:
            token_condition[s["token"]] = s["condition"]
    hidden = definition["hidden_reference"]

    by_rater: dict[str, list[Mapping]] = {}
    for r in ratings:
        by_rater.setdefault(r["session_id"], []).append(r)

    raters = {}
    flagged = set()
    for sid, rs in by_rater.items():
        low = 0
        for r in rs:
            for tok, score in r["scores"].items():
                if token_condition.get(tok) == hidden and score < (screening.threshold if screening else 90):
                    low += 1
        fraction = low / len(rs)
        is_flagged = screening is not None and fraction > screening.max_fraction
        raters[sid] = {"trials": len(rs), "hidden_reference_low_fraction": fraction, "flagged": is_flagged}
        if is_flagged:
            flagged.add(sid)

    kept: dict[str, list[float]] = {}
    dropped: dict[str, list[float]] = {}
    for sid, rs in by_rater.items():
        target = dropped if sid in flagged else kept
        for r in rs:
            for tok, score in r["scores"].items():
                cond = token_condition.get(tok)
                if cond is not None:
                    target.setdefault(cond, []).append(float(score))

    order = [c for c in definition["conditions"]]
    return {
        "test_id": definition["test_id"],
        "screening": None if screening is None else {"threshold": screening.threshold,
                                                     "max_fraction": screening.max_fraction},
        "conditions": {c: _stats(kept[c]) for c in order if c in kept},
        "raters": raters,
        "flagged": {c: _stats(dropped[c]) for c in order if c in dropped},
    }


# ---------------------------------------------------------------- journal store


def _session_rng(session_id: str) -> np.random.Generator:
    digest = hashlib.sha256(session_id.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class MushraStore:
    """Test definitions plus an append-only JSON-lines journal of sessions and ratings."""

    def __init__(self, data_dir, screening: ScreeningRule | None = None):
        self.data_dir = Path(data_dir)
        self.tests_dir = self.data_dir / "tests"
        self.tests_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.data_dir / "journal.jsonl"
        self.screening = screening
        self._lock = threading.Lock()
        self.tests: dict[str, dict] = {}
        self.tokens: dict[str, str] = {}
        self.sessions: dict[str, dict] = {}
        self.ratings: dict[str, list[dict]] = {}
        for path in sorted(self.tests_dir.glob("*.json")):
            self._register(json.loads(path.read_text(encoding="utf-8")))
        self._replay()

    def _register(self, definition: dict) -> None:
        validate_definition(definition)
        self.tests[definition["test_id"]] = definition
        for trial in definition["trials"]:
            self.tokens[trial["reference"]["token"]] = trial["reference"]["path"]
            for s in trial["stimuli"]:
                self.tokens[s["token"]] = s["path"]

    def add_test(self, definition: dict) -> str:
        with self._lock:
            self._register(definition)
            path = self.tests_dir / f"{definition['test_id']}.json"
            path.write_text(json.dumps(definition, indent=2), encoding="utf-8")
        return definition["test_id"]

    def _replay(self) -> None:
        if not self.journal_path.exists():
            return
        with open(self.journal_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from a crash is ignored
                    continue
                self._apply(rec)

    def _apply(self, rec: dict) -> None:
        if rec["type"] == "session":
            if rec["test_id"] not in self.tests:
                return
            self.sessions[rec["session_id"]] = self._plan(rec["session_id"], rec["test_id"])
        elif rec["type"] == "rating":
            self.ratings.setdefault(rec["test_id"], []).append(rec)
            session = self.sessions.get(rec["session_id"])
            if session is not None:
                session["done"].add(rec["index"])

    def _append(self, rec: dict) -> None:
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _plan(self, session_id: str, test_id: str) -> dict:
        definition = self.tests[test_id]
        rng = _session_rng(session_id)
        trial_order = rng.permutation(len(definition["trials"])).tolist()
        stim_orders = [rng.permutation(len(definition["trials"][t]["stimuli"])).tolist() for t in trial_order]
        return {"test_id": test_id, "trial_order": trial_order, "stimulus_orders": stim_orders, "done": set()}

    # ------------------------------------------------------------ protocol

    def create_session(self, test_id: str) -> dict:
        if test_id not in self.tests:
            raise UnknownTestError(f"unknown test {test_id!r}")
        session_id = uuid.uuid4().hex
        rec = {"type": "session", "session_id": session_id, "test_id": test_id, "created": time.time()}
        with self._lock:
            self._append(rec)
            self._apply(rec)
        return {"session_id": session_id, "test_id": test_id, "num_trials": len(self.tests[test_id]["trials"])}

    def _session(self, session_id: str) -> dict:
        session = self.sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        return session

    def _trial(self, session: dict, index: int):
        definition = self.tests[session["test_id"]]
        trial = definition["trials"][session["trial_order"][index]]
        stimuli = [trial["stimuli"][j] for j in session["stimulus_orders"][index]]
        return trial, stimuli

    def get_trial(self, session_id: str, index: int) -> dict:
        session = self._session(session_id)
        n = len(session["trial_order"])
        if index < 0:
            raise ValidationError("trial index must be non-negative")
        if index >= n:
            return {"session_id": session_id, "index": index, "num_trials": n, "complete": True}
        trial, stimuli = self._trial(session, index)
        return {
            "session_id": session_id,
            "index": index,
            "num_trials": n,
            "complete": False,
            "submitted": index in session["done"],
            "reference_token": trial["reference"]["token"],
            "stimuli": [s["token"] for s in stimuli],
        }

    def submit_scores(self, session_id: str, index: int, scores: Mapping, timestamp: float | None = None) -> dict:
        session = self._session(session_id)
        n = len(session["trial_order"])
        if not 0 <= index < n:
            raise ValidationError(f"trial index {index} out of range 0..{n - 1}")
        trial, stimuli = self._trial(session, index)
        expected = [s["token"] for s in stimuli]
        if not isinstance(scores, Mapping):
            raise ValidationError("scores must map stimulus tokens to integers")
        for tok in expected:
            if tok not in scores:
                raise ValidationError(f"missing score for token {tok}", tok)
        for tok, value in scores.items():
            if tok not in expected:
                raise ValidationError(f"token {tok} does not belong to this trial", tok)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"score for token {tok} must be an integer", tok)
            if not 0 <= value <= 100:
                raise ValidationError(f"score {value} for token {tok} outside 0..100", tok)
        rec = {
            "type": "rating",
            "session_id": session_id,
            "test_id": session["test_id"],
            "index": index,
            "trial_id": trial["trial_id"],
            "scores": {tok: int(scores[tok]) for tok in expected},
            "timestamp": time.time() if timestamp is None else float(timestamp),
        }
        with self._lock:
            if index in session["done"]:
                raise AlreadySubmittedError(f"trial {index} of session {session_id} was already submitted")
            self._append(rec)
            self._apply(rec)
        return {"accepted": True, "index": index}

    def aggregate(self, test_id: str) -> dict:
        if test_id not in self.tests:
            raise UnknownTestError(f"unknown test {test_id!r}")
        return aggregate(self.tests[test_id], list(self.ratings.get(test_id, [])), self.screening)

    def audio_path(self, token: str) -> str:
        try:
            return self.tokens[token]
        except KeyError:
            raise UnknownTestError("unknown stimulus token") from None
