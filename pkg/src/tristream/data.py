"""Synthetic tri-modal corpus generation and the binary checkpoint format.

Corpus files are line-delimited JSON, one record per line; vision feature
blocks travel as base64 float32. All randomness is derived from one seed,
with splits drawn from disjoint seed-derived streams, so regeneration is
byte-identical. Checkpoints are a single binary container: magic "SOMNI",
version, JSON header (config + tensor directory), float32 payload, and a
trailing SHA-256 checksum.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .model import Model, ModelConfig
from .streaming import SyntheticSpeechCodec, speech_tokenize
from .vocab import MultimodalVocab, build_vocab

TASKS = ("ASR", "T2T", "S2T", "S2S", "VT2T", "VS2T", "VS2S")
SPLITS = ("train", "dev", "test")

DEFAULT_TASK_MIX = {
    "ASR": 0.22, "T2T": 0.12, "S2T": 0.16, "S2S": 0.16,
    "VT2T": 0.10, "VS2T": 0.12, "VS2S": 0.12,
}

# which optional fields each task carries
_TASK_FIELDS = {
    "ASR": ("input_units",),
    "T2T": ("input_text",),
    "S2T": ("input_units",),
    "S2S": ("input_units", "target_units"),
    "VT2T": ("vision_features", "input_text"),
    "VS2T": ("vision_features", "input_units"),
    "VS2S": ("vision_features", "input_units", "target_units"),
}


@dataclass
class CorpusRecord:
    id: str
    task: str
    target_text: list[int]
    vision_features: Optional[np.ndarray] = None
    input_text: Optional[list[int]] = None
    input_units: Optional[list[int]] = None
    target_units: Optional[list[int]] = None

    def to_json(self) -> str:
        rec = {"id": self.id, "task": self.task}
        if self.vision_features is not None:
            rec["vision_features"] = base64.b64encode(
                np.ascontiguousarray(self.vision_features, dtype="<f4").tobytes()).decode("ascii")
        if self.input_text is not None:
            rec["input_text"] = self.input_text
        if self.input_units is not None:
            rec["input_units"] = self.input_units
        rec["target_text"] = self.target_text
        if self.target_units is not None:
            rec["target_units"] = self.target_units
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str, vision_shape: tuple[int, int]) -> "CorpusRecord":
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"corpus line is not valid JSON: {exc}") from exc
        vis = None
        if "vision_features" in rec:
            raw = base64.b64decode(rec["vision_features"])
            want = vision_shape[0] * vision_shape[1] * 4
            if len(raw) != want:
                raise DataError(f"vision block has {len(raw)} bytes, expected {want}")
            vis = np.frombuffer(raw, dtype="<f4").reshape(vision_shape)
        try:
            return cls(
                id=rec["id"], task=rec["task"], target_text=list(rec["target_text"]),
                vision_features=vis,
                input_text=rec.get("input_text"),
                input_units=rec.get("input_units"),
                target_units=rec.get("target_units"),
            )
        except KeyError as exc:
            raise DataError(f"corpus record missing field {exc}") from exc


class SyntheticWorld:
    """Shared ground truth behind a corpus: codec, recall table, vision labels.

    Everything derives from (vocab, seed), so the train/dev/test splits of
    one corpus agree on what the right answers are.
    """

    def __init__(self, vocab: MultimodalVocab, seed: int, n_keys: int = 16,
                 n_labels: int = 12, vision_tokens: int = 16, vision_dim: int = 32):
        self.vocab = vocab
        self.seed = seed
        self.vision_tokens = vision_tokens
        self.vision_dim = vision_dim
        self.codec = SyntheticSpeechCodec(vocab, seed)
        content = list(vocab.content_text_ids())
        if len(content) < n_keys + n_labels + 8:
            raise ConfigError(f"text vocab too small: {len(content)} content ids for "
                              f"{n_keys} keys + {n_labels} labels")
        if n_labels > vision_dim:
            raise ConfigError(f"{n_labels} labels need {n_labels} channels, have {vision_dim}")
        rng = np.random.default_rng([seed, 17])
        perm = [int(x) for x in rng.permutation(content)]
        self.keys = perm[:n_keys]
        self.labels = perm[n_keys:n_keys + n_labels]
        self.fillers = perm[n_keys + n_labels:]
        self.content = content
        self.recall = {k: sample_phrase(rng, 5, 8, content) for k in self.keys}
        self.label_phrase = {lab: sample_phrase(rng, 5, 8, content) for lab in self.labels}
        self.label_channel = {lab: i for i, lab in enumerate(self.labels)}

    def vision_block(self, rng: np.random.Generator, label: int) -> np.ndarray:
        """Noise block whose dominant channel encodes the label."""
        block = rng.normal(0.0, 0.5, size=(self.vision_tokens, self.vision_dim))
        block[:, self.label_channel[label]] += 3.0
        return block.astype("<f4")


def sample_phrase(rng: np.random.Generator, lo: int, hi: int,
                  alphabet: Sequence[int]) -> list[int]:
    """Random token phrase with no adjacent repeats (keeps CTC targets easy
    to satisfy: path length never needs extra blank separators)."""
    n = int(rng.integers(lo, hi + 1))
    out: list[int] = []
    prev = None
    for _ in range(n):
        t = int(rng.choice(alphabet))
        while t == prev:
            t = int(rng.choice(alphabet))
        out.append(t)
        prev = t
    return out


def _make_record(world: SyntheticWorld, rng: np.random.Generator, task: str,
                 rec_id: str) -> CorpusRecord:
    codec = world.codec
    if task == "ASR":
        text = sample_phrase(rng, 3, 9, world.content)
        return CorpusRecord(rec_id, task, target_text=text,
                            input_units=speech_tokenize(text, codec))
    if task == "T2T":
        if rng.random() < 0.5:
            text = sample_phrase(rng, 2, 6, world.content)
            return CorpusRecord(rec_id, task, target_text=list(text), input_text=text)
        key = int(rng.choice(world.keys))
        return CorpusRecord(rec_id, task, target_text=list(world.recall[key]),
                            input_text=[key])
    if task in ("S2T", "S2S"):
        key = int(rng.choice(world.keys))
        answer = list(world.recall[key])
        units = speech_tokenize([key], codec)
        if task == "S2T":
            return CorpusRecord(rec_id, task, target_text=answer, input_units=units)
        return CorpusRecord(rec_id, task, target_text=answer, input_units=units,
                            target_units=speech_tokenize(answer, codec))
    if task in ("VT2T", "VS2T", "VS2S"):
        label = int(rng.choice(world.labels))
        answer = list(world.label_phrase[label])
        vis = world.vision_block(rng, label)
        query = sample_phrase(rng, 1, 2, world.fillers)
        if task == "VT2T":
            return CorpusRecord(rec_id, task, target_text=answer,
                                vision_features=vis, input_text=query)
        units = speech_tokenize(query, codec)
        if task == "VS2T":
            return CorpusRecord(rec_id, task, target_text=answer,
                                vision_features=vis, input_units=units)
        return CorpusRecord(rec_id, task, target_text=answer, vision_features=vis,
                            input_units=units,
                            target_units=speech_tokenize(answer, codec))
    raise ConfigError(f"unknown task {task!r}")


def normalize_task_mix(mix: Optional[dict]) -> dict[str, float]:
    mix = dict(DEFAULT_TASK_MIX if mix is None else mix)
    for task, w in mix.items():
        if task not in TASKS:
            raise DataError(f"unknown task {task!r} in mix; choose from {TASKS}")
        if w < 0:
            raise DataError(f"negative weight for task {task}")
    total = sum(mix.values())
    if total <= 0:
        raise DataError("task mix weights sum to zero")
    return {t: mix.get(t, 0.0) / total for t in TASKS}


def gen_corpus(out_dir, vocab: MultimodalVocab, seed: int, n_train: int, n_dev: int,
               n_test: int, task_mix: Optional[dict] = None,
               vision_tokens: int = 16, vision_dim: int = 32) -> dict:
    """Write train/dev/test JSONL files plus meta.json; deterministic in seed."""
    mix = normalize_task_mix(task_mix)
    world = SyntheticWorld(vocab, seed, vision_tokens=vision_tokens, vision_dim=vision_dim)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = list(TASKS)
    probs = np.asarray([mix[t] for t in tasks])
    counts = dict(zip(SPLITS, (n_train, n_dev, n_test)))
    for si, (split, n) in enumerate(counts.items()):
        rng = np.random.default_rng([seed, 100 + si])
        with open(out / f"{split}.jsonl", "w") as fh:
            for i in range(n):
                task = tasks[int(rng.choice(len(tasks), p=probs))]
                rec = _make_record(world, rng, task, f"{split}-{i:06d}")
                fh.write(rec.to_json() + "\n")
    meta = {
        "format_version": 1,
        "seed": seed,
        "text_size": vocab.text_size,
        "unit_size": vocab.unit_size,
        "vision_tokens": vision_tokens,
        "vision_dim": vision_dim,
        "task_mix": mix,
        "counts": counts,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta


def load_meta(corpus_dir) -> dict:
    path = Path(corpus_dir) / "meta.json"
    if not path.exists():
        raise DataError(f"no meta.json in {corpus_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_split(corpus_dir, split: str) -> list[CorpusRecord]:
    meta = load_meta(corpus_dir)
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"no {split}.jsonl in {corpus_dir}")
    shape = (meta["vision_tokens"], meta["vision_dim"])
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(CorpusRecord.from_json(line, shape))
    return records


def world_from_meta(meta: dict) -> SyntheticWorld:
    vocab = build_vocab(meta["text_size"], meta["unit_size"])
    return SyntheticWorld(vocab, meta["seed"], vision_tokens=meta["vision_tokens"],
                          vision_dim=meta["vision_dim"])


def validate_record(rec: CorpusRecord, vocab: MultimodalVocab,
                    codec: SyntheticSpeechCodec) -> None:
    """Raise DataError unless the record satisfies its task's field contract
    and is consistent with the generating codec."""
    if rec.task not in TASKS:
        raise DataError(f"{rec.id}: unknown task {rec.task!r}")
    want = set(_TASK_FIELDS[rec.task])
    have = {f for f in ("vision_features", "input_text", "input_units", "target_units")
            if getattr(rec, f) is not None}
    if want != have:
        raise DataError(f"{rec.id}: task {rec.task} needs fields {sorted(want)}, has {sorted(have)}")
    if not rec.target_text:
        raise DataError(f"{rec.id}: empty target_text")
    for t in rec.target_text + (rec.input_text or []):
        if not vocab.is_text(int(t)) or int(t) < 4:
            raise DataError(f"{rec.id}: text id {t} outside the content range")
    for u in (rec.input_units or []) + (rec.target_units or []):
        if not vocab.is_unit(int(u)):
            raise DataError(f"{rec.id}: id {u} is not a speech unit")
    if rec.target_units is not None:
        if rec.target_units != speech_tokenize(rec.target_text, codec):
            raise DataError(f"{rec.id}: target_units inconsistent with codec")
    if rec.task == "ASR":
        if rec.input_units != speech_tokenize(rec.target_text, codec):
            raise DataError(f"{rec.id}: ASR input_units inconsistent with transcription")


def validate_corpus(corpus_dir) -> dict:
    """Validate every record of every split; returns per-split counts."""
    meta = load_meta(corpus_dir)
    world = world_from_meta(meta)
    out = {}
    for split in SPLITS:
        records = load_split(corpus_dir, split)
        for rec in records:
            validate_record(rec, world.vocab, world.codec)
        out[split] = len(records)
    return out


# -- checkpoint container ---------------------------------------------------------

MAGIC = b"SOMNI"
CKPT_VERSION = 1


def save_checkpoint(path, model: Model, meta: Optional[dict] = None) -> None:
    """Serialize config + parameters as float32 LE with a SHA-256 trailer."""
    params = model.parameters()
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
    }
    hjson = json.dumps(header, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack("<I", len(hjson))
    buf += hjson
    for t in params.values():
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None):
    """Return (config, name -> float32 array, meta); verifies the checksum
    before touching the payload and refuses config mismatches."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    off += 8
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    config = ModelConfig.from_dict(header["config"])
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise CheckpointError(f"{path}: checkpoint config does not match the expected config")
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 4
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: payload shorter than tensor directory")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing payload bytes")
    return config, arrays, header.get("meta", {})


def load_model(path, expect_config: Optional[ModelConfig] = None) -> tuple[Model, dict]:
    """Materialize a Model from a checkpoint file."""
    config, arrays, meta = load_checkpoint(path, expect_config)
    model = Model(config, np.random.default_rng(0))
    try:
        model.load_arrays(arrays)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, meta
