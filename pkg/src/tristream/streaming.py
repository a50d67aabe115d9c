"""Streaming session orchestration: simultaneous ASR partials, text tokens,
and lag-K speech units gated by the CTC alignment over generated units.

The synthetic speech codec stands in for a real speech tokenizer/decoder
pair: each text token expands to a short fixed unit string that starts with
a dedicated marker unit, so unit streams segment deterministically and a
reference decoder can invert them.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .ctc import CtcAlignment, collapse, extend_alignment
from .errors import ConfigError, DataError, SessionError
from .model import Model
from .numerics import Tensor, no_grad
from .vocab import BOS_ID, EOS_ID, MultimodalVocab

ASR_PARTIAL = "asr_partial"
TEXT_TOKEN = "text_token"
SPEECH_UNIT = "speech_unit"
SPEECH_CHUNK = "speech_chunk"
WARNING = "warning"
EOS = "eos"


@dataclass
class StreamEvent:
    """Tagged element of the simultaneous output stream."""

    step: int
    kind: str
    payload: object
    wall_ns: int

    def record(self) -> dict:
        # field order is the wire contract: step, kind, payload, wall_ns
        return {"step": self.step, "kind": self.kind, "payload": self.payload,
                "wall_ns": self.wall_ns}


def format_trace_line(ev: StreamEvent) -> str:
    return json.dumps(ev.record(), separators=(",", ":"))


# -- synthetic speech codec ----------------------------------------------------


class SyntheticSpeechCodec:
    """Deterministic text-id -> unit-string expansion table.

    Unit local id 0 is the token-start marker; the remaining unit alphabet
    carries a prefix-free payload of 1..3 units, so every expansion is 2..4
    units long, token boundaries are the markers, and each token becomes
    identifiable at its own final unit.
    """

    def __init__(self, vocab: MultimodalVocab, seed: int):
        self.vocab = vocab
        self.seed = seed
        if vocab.unit_size < 3:
            raise ConfigError(f"codec needs unit_size >= 3, got {vocab.unit_size}")
        rng = np.random.default_rng(seed)
        alphabet = list(range(1, vocab.unit_size))  # local ids; 0 is the marker
        pool: list[tuple[int, ...]] = [(a,) for a in alphabet]
        need = vocab.text_size
        # grow a random prefix-free code until it covers every text id, then
        # keep splitting a little for length variety
        extra = max(2, need // 8)
        while len(pool) < need + extra:
            grew = False
            order = rng.permutation(len(pool))
            for i in order:
                w = pool[i]
                if len(w) < 3:
                    pool.pop(int(i))
                    pool.extend(w + (a,) for a in alphabet)
                    grew = True
                    break
            if not grew:
                break
        if len(pool) < need:
            raise ConfigError(
                f"unit alphabet too small: {len(pool)} payloads for {need} text ids")
        rng.shuffle(pool)
        marker = vocab.unit_global(0)
        self._expansion: dict[int, tuple[int, ...]] = {}
        self._payload_to_text: dict[tuple[int, ...], int] = {}
        for tid in range(vocab.text_size):
            payload = pool[tid]
            self._expansion[tid] = (marker,) + tuple(vocab.unit_global(a) for a in payload)
            self._payload_to_text[payload] = tid

    @property
    def marker_unit(self) -> int:
        return self.vocab.unit_global(0)

    def expansion(self, text_id: int) -> tuple[int, ...]:
        if not self.vocab.is_text(text_id):
            raise ConfigError(f"id {text_id} is not a text token")
        return self._expansion[text_id]

    def tokenize(self, text: Sequence[int]) -> list[int]:
        """Concatenate per-token expansions (the speech tokenizer stand-in)."""
        out: list[int] = []
        for t in text:
            out.extend(self.expansion(int(t)))
        return out

    def decode(self, units: Sequence[int]) -> list[int]:
        """Reference decoder: split at markers, look payloads back up."""
        units = [int(u) for u in units]
        if units and units[0] != self.marker_unit:
            raise DataError("unit stream does not start at a token marker")
        out: list[int] = []
        payload: list[int] = []
        started = False

        def flush():
            key = tuple(self.vocab.unit_local(u) for u in payload)
            if key not in self._payload_to_text:
                raise DataError(f"undecodable unit payload {key}")
            out.append(self._payload_to_text[key])

        for u in units:
            if u == self.marker_unit:
                if started:
                    flush()
                payload = []
                started = True
            else:
                payload.append(u)
        if started:
            flush()
        return out


def speech_tokenize(text: Sequence[int], codec: SyntheticSpeechCodec) -> list[int]:
    return codec.tokenize(text)


def speech_synthesize(units: Sequence[int], codec: SyntheticSpeechCodec) -> list[list[int]]:
    """Package a unit stream into chunks, one per completed token (split at
    markers). No audio DSP happens at desk scale; chunks carry the units."""
    chunks: list[list[int]] = []
    cur: list[int] = []
    for u in units:
        if u == codec.marker_unit and cur:
            chunks.append(cur)
            cur = []
        cur.append(int(u))
    if cur:
        chunks.append(cur)
    return chunks


# -- modality routing ------------------------------------------------------------


@dataclass(frozen=True)
class SessionPlan:
    vision: bool
    speech_in: bool
    text_in: bool
    speech_out: bool

    @property
    def name(self) -> str:
        pre = "V" if self.vision else ""
        src = "S" if self.speech_in else "T"
        dst = "S" if self.speech_out else "T"
        return f"{pre}{src}2{dst}"


_SUPPORTED_ROUTES = {
    (False, False, True, False),  # T2T
    (False, True, False, False),  # S2T
    (False, True, False, True),   # S2S
    (True, False, True, False),   # VT2T
    (True, True, False, False),   # VS2T
    (True, True, False, True),    # VS2S
}


def modality_route(has_vision: bool, has_speech: bool, has_text: bool,
                   speech_out: bool) -> SessionPlan:
    """Validate the requested modality combination and fix the context order."""
    key = (bool(has_vision), bool(has_speech), bool(has_text), bool(speech_out))
    if not (has_speech or has_text):
        raise ConfigError("no query modality: need speech or text input")
    if key not in _SUPPORTED_ROUTES:
        raise ConfigError(f"unsupported modality combination "
                          f"vision={has_vision} speech={has_speech} text={has_text} "
                          f"speech_out={speech_out}")
    return SessionPlan(*key)


# -- model-backed session state ---------------------------------------------------


class ModelBackend:
    """Adapts a Model to the incremental interface run_session drives.

    Any object with the same methods (and a `vocab` attribute) can stand in,
    which is how scripted mock models plug into the scheduler tests.
    """

    def __init__(self, model: Model, window=None):
        self.model = model
        self.vocab = model.vocab
        self.config = model.config
        self.window = model.config.fusion_window if window is None else window
        self.cache = model.new_session_cache()
        self._input_rows: list[np.ndarray] = []
        self._input_path: list[int] = []
        self._h_text: list[np.ndarray] = []
        self._next_logits: Optional[np.ndarray] = None
        self._pending_top_row: Optional[Tensor] = None

    def input_frame(self, unit_id: int) -> np.ndarray:
        """Feed one input speech unit; returns that frame's CTC logits row."""
        with no_grad():
            h = self.model.bottom_forward([unit_id], self.cache.bottom)
            row = self.model.ctc_logits(h)
        self._input_rows.append(h.data[0])
        return row.data[0]

    def note_input_path(self, path_id: int) -> None:
        self._input_path.append(path_id)

    def start_text(self, vision_features=None, input_text=None) -> None:
        """Prefill the core with [vision : speech : text : bos]."""
        cfg = self.config
        rows: list[np.ndarray] = []
        with no_grad():
            if vision_features is not None:
                rows.append(self.model.vision_encode(vision_features).data)
            if self._input_rows:
                speech = np.stack(self._input_rows)
                if cfg.remove_input_blanks and self._input_path:
                    keep = [i for i, t in enumerate(self._input_path)
                            if t != self.vocab.blank_id]
                    speech = speech[keep]
                if len(speech):
                    rows.append(speech)
            if input_text:
                rows.append(self.model.embed_ids(list(input_text)).data)
            rows.append(self.model.embed_ids([BOS_ID]).data)
            ctx = Tensor(np.concatenate(rows, axis=0), dtype=cfg.dtype)
            _, logits = self.model.core_forward(ctx, self.cache.core)
        self._next_logits = logits.data

    def next_text(self) -> int:
        """Greedy-pick the next text token and feed it back through the core."""
        if self._next_logits is None:
            raise SessionError("next_text before start_text")
        y = int(np.argmax(self._next_logits))
        if y != EOS_ID:
            with no_grad():
                h, logits = self.model.core_forward(self.model.embed_ids([y]),
                                                    self.cache.core)
            self._h_text.append(h.data[0])
            self._next_logits = logits.data
        return y

    def next_unit(self, align: CtcAlignment) -> int:
        """One top-stack step; returns a unit-local id or the unit-eos index."""
        if not self._h_text:
            raise SessionError("next_unit before any text token")
        h_text = Tensor(np.stack(self._h_text), dtype=self.config.dtype)
        with no_grad():
            logits = self.model.top_forward(self._pending_top_row, h_text, align,
                                            self.cache.top, window=self.window)
        self._pending_top_row = None
        return int(np.argmax(logits.data))

    def observe_unit(self, unit_local: int) -> np.ndarray:
        """Re-encode the just-generated unit; returns its CTC logits row."""
        gid = self.vocab.unit_global(unit_local)
        with no_grad():
            h = self.model.bottom_forward([gid], self.cache.gen_bottom)
            row = self.model.ctc_logits(h)
        if self.config.top_input_mode == "bottom":
            self._pending_top_row = h
        else:
            with no_grad():
                self._pending_top_row = self.model.embed_ids([gid])
        return row.data[0]


# -- the orchestrator --------------------------------------------------------------


def run_session(model, *, vision=None, input_units: Optional[Sequence[int]] = None,
                input_text: Optional[Sequence[int]] = None, speech_out: bool = False,
                wait_k: Optional[int] = None, window=None,
                max_units_per_token: Optional[int] = None,
                max_text_tokens: Optional[int] = None) -> Iterator[StreamEvent]:
    """Run one interaction session, lazily yielding stream events.

    `model` is a Model or any backend implementing the incremental protocol
    (input_frame / start_text / next_text / next_unit / observe_unit, plus a
    `vocab` attribute). Event contract: ASR partials for speech input, text
    tokens as generated, no speech unit before the wait_k-th text token, one
    recognized text symbol per inner speech burst, chunk at each burst end,
    Eos last with a summary payload.
    """
    backend = model if hasattr(model, "next_text") else ModelBackend(model, window=window)
    cfg = getattr(backend, "config", None)
    k = wait_k if wait_k is not None else (cfg.wait_k if cfg else 3)
    cap = max_units_per_token if max_units_per_token is not None else \
        (cfg.max_units_per_token if cfg else 20)
    max_text = max_text_tokens if max_text_tokens is not None else \
        (cfg.max_text_tokens if cfg else 48)
    if k < 1:
        raise ConfigError(f"wait_k must be >= 1, got {k}")
    plan = modality_route(vision is not None, bool(input_units), bool(input_text),
                          speech_out)
    vocab: MultimodalVocab = backend.vocab
    unit_eos_local = vocab.unit_size

    step = 0

    def ev(kind, payload):
        nonlocal step
        e = StreamEvent(step, kind, payload, time.monotonic_ns())
        step += 1
        return e

    # 1. stream the input speech through the bottom stack, emitting an ASR
    #    partial whenever the collapsed transcript grows
    input_align = CtcAlignment.empty(vocab.blank_id)
    if plan.speech_in:
        for u in input_units:
            row = backend.input_frame(int(u))
            before = input_align.count
            extend_alignment(input_align, row, vocab)
            if hasattr(backend, "note_input_path"):
                backend.note_input_path(input_align.path[-1])
            if input_align.count > before:
                yield ev(ASR_PARTIAL, input_align.collapsed())

    # 2. autoregressive text with lag-K speech bursts
    backend.start_text(vision_features=vision, input_text=list(input_text or []))
    gen_align = CtcAlignment.empty(vocab.blank_id, sentinels=2)
    text_out: list[int] = []
    units_out: list[int] = []
    state = {"visits": 0, "closed": not plan.speech_out}

    def speak_one_token():
        """Generate units until the alignment recognizes one new text symbol."""
        state["visits"] += 1
        burst: list[int] = []
        while True:
            if gen_align.count > len(text_out):
                raise SessionError("alignment count ran past the generated text")
            local = backend.next_unit(gen_align)
            if local == unit_eos_local:
                state["closed"] = True
                break
            gid = vocab.unit_global(local)
            units_out.append(gid)
            burst.append(gid)
            yield ev(SPEECH_UNIT, gid)
            row = backend.observe_unit(local)
            before = gen_align.count
            extend_alignment(gen_align, row, vocab)
            if gen_align.count > before:
                break
            if len(burst) >= cap:
                yield ev(WARNING, f"unit cap {cap} hit for text token {state['visits']}")
                break
        if burst:
            yield ev(SPEECH_CHUNK, burst)

    saw_eos = False
    while len(text_out) < max_text:
        y = backend.next_text()
        yield ev(TEXT_TOKEN, y)
        if y == EOS_ID:
            saw_eos = True
            break
        text_out.append(y)
        if plan.speech_out and not state["closed"] and len(text_out) >= k:
            yield from speak_one_token()
    if not saw_eos:
        yield ev(WARNING, f"text cap {max_text} hit; forcing end of stream")

    # 3. flush: tokens still inside the lag get their speech; the eos token
    #    itself is never spoken
    if plan.speech_out and state["visits"] > 0:
        while state["visits"] < len(text_out) and not state["closed"]:
            yield from speak_one_token()

    summary = {
        "text": list(text_out),
        "units": list(units_out),
        "unit_text": collapse(gen_align.content_path(), vocab.blank_id),
        "asr_text": input_align.collapsed(),
    }
    yield ev(EOS, summary)


def iter_threaded(events: Iterator[StreamEvent], maxsize: int = 8) -> Iterator[StreamEvent]:
    """Consume a session from another thread through a bounded hand-off
    queue; a full queue blocks the producer (backpressure)."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def produce():
        try:
            for ev in events:
                q.put(ev)
            q.put(done)
        except BaseException as exc:  # forwarded to the consumer
            q.put(exc)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    t.join()
