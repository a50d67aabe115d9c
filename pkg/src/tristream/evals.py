"""Evaluation metrics: WER via minimum edit distance, exact match on recall
tasks, and unit consistency (does the CTC decode of the model's own
generated units reproduce its generated text)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ctc import ctc_greedy_decode
from .data import CorpusRecord
from .errors import DataError
from .model import Model
from .numerics import no_grad
from .streaming import EOS, run_session


@dataclass
class EvalResult:
    task: str
    metric: str  # WER | exact_match | unit_consistency
    value: float
    n: int

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metric": self.metric,
                           "value": round(self.value, 6), "n": self.n},
                          separators=(",", ":"))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Minimum edits (substitution/deletion/insertion) turning ref into hyp."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            if r == h:
                cur.append(prev[j - 1])
            else:
                cur.append(1 + min(prev[j - 1], prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def word_error_rate(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """(S+D+I) summed over pairs, divided by total reference length."""
    errs = sum(edit_distance(ref, hyp) for ref, hyp in pairs)
    total = sum(len(ref) for ref, _ in pairs)
    if total == 0:
        raise DataError("WER undefined: empty references")
    return errs / total


def _session_summary(model: Model, rec: CorpusRecord, speech_out: bool) -> dict:
    events = run_session(
        model,
        vision=rec.vision_features,
        input_units=rec.input_units,
        input_text=rec.input_text,
        speech_out=speech_out,
    )
    last = None
    for ev in events:
        last = ev
    assert last is not None and last.kind == EOS
    return last.payload


def eval_asr(model: Model, records: Sequence[CorpusRecord],
             limit: Optional[int] = None) -> EvalResult:
    """Greedy CTC transcription WER over ASR records."""
    records = [r for r in records if r.task == "ASR"][: limit or None]
    if not records:
        raise DataError("no ASR records to evaluate")
    pairs = []
    with no_grad():
        for rec in records:
            h = model.bottom_forward(rec.input_units)
            align = ctc_greedy_decode(model.ctc_logits(h).data, model.vocab)
            pairs.append((rec.target_text, align.collapsed()))
    return EvalResult("ASR", "WER", word_error_rate(pairs), len(records))


def eval_exact_match(model: Model, records: Sequence[CorpusRecord],
                     tasks: tuple = ("S2T", "VS2T"),
                     limit: Optional[int] = None) -> EvalResult:
    """Fraction of sessions whose generated text equals the target exactly."""
    records = [r for r in records if r.task in tasks][: limit or None]
    if not records:
        raise DataError(f"no records with task in {tasks} to evaluate")
    hits = 0
    for rec in records:
        summary = _session_summary(model, rec, speech_out=False)
        hits += summary["text"] == rec.target_text
    return EvalResult("+".join(tasks), "exact_match", hits / len(records), len(records))


def eval_unit_consistency(model: Model, records: Sequence[CorpusRecord],
                          tasks: tuple = ("S2S", "VS2S"),
                          limit: Optional[int] = None) -> EvalResult:
    """Fraction of speech-output sessions where the CTC collapse of the
    generated units equals the generated text."""
    records = [r for r in records if r.task in tasks][: limit or None]
    if not records:
        raise DataError(f"no records with task in {tasks} to evaluate")
    hits = 0
    for rec in records:
        summary = _session_summary(model, rec, speech_out=True)
        hits += summary["unit_text"] == summary["text"]
    return EvalResult("+".join(tasks), "unit_consistency", hits / len(records), len(records))


def unit_teacher_accuracy(model: Model, records: Sequence[CorpusRecord],
                          limit: Optional[int] = None) -> float:
    """Teacher-forced next-unit accuracy over speech-output records; the
    stage-2 progress metric."""
    from .training import speech_generation_batch  # local import, no cycle at module load

    records = [r for r in records if r.target_units is not None][: limit or None]
    if not records:
        return 0.0
    by_task: dict[str, list[CorpusRecord]] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r)
    good = total = 0
    with no_grad():
        for chunk_pool in by_task.values():
            for i in range(0, len(chunk_pool), 8):
                chunk = chunk_pool[i:i + 8]
                logits, targets, mask = speech_generation_batch(model, chunk)
                pred = np.argmax(logits.data, axis=-1)
                sel = mask > 0
                good += int((pred[sel] == targets[sel]).sum())
                total += int(sel.sum())
    return good / max(total, 1)
