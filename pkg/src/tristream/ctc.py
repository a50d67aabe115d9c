"""CTC loss, greedy decoding, and incremental alignment bookkeeping.

The loss is the standard forward (alpha) recursion in log space over the
blank-extended target; its gradient comes from the alpha-beta occupancy
pass. Decoding is greedy argmax restricted to text-or-blank columns, with
repeat collapse tracked incrementally so a stream can ask "how many text
tokens have the first i frames committed to" in O(1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor, accumulate, op_node
from .vocab import MultimodalVocab

NEG_INF = -np.inf


def collapse(ids: Sequence[int], blank_id: int) -> list[int]:
    """Merge adjacent repeats, then delete blanks.

    A blank separates repeats, so [a, blank, a] collapses to [a, a].
    """
    out: list[int] = []
    prev: Optional[int] = None
    for t in ids:
        if t != prev:
            out.append(t)
        prev = t
    return [t for t in out if t != blank_id]


@dataclass
class CtcAlignment:
    """Greedy CTC path with per-prefix collapsed-text counts.

    `path` may start with sentinel blank frames (streaming seeds two so the
    repeat test is defined from the first real frame); `n_sentinels` says
    how many. `prefix_counts[i]` equals len(collapse(path[:i+1])).
    """

    blank_id: int
    path: list[int] = field(default_factory=list)
    prefix_counts: list[int] = field(default_factory=list)
    last_emit: Optional[int] = None
    n_sentinels: int = 0

    @classmethod
    def empty(cls, blank_id: int, sentinels: int = 0) -> "CtcAlignment":
        a = cls(blank_id=blank_id, n_sentinels=sentinels)
        for _ in range(sentinels):
            a.append_frame_id(blank_id)
        return a

    @property
    def count(self) -> int:
        """Collapsed text length over the whole path so far."""
        return self.prefix_counts[-1] if self.prefix_counts else 0

    def content_path(self) -> list[int]:
        return self.path[self.n_sentinels:]

    def content_counts(self) -> list[int]:
        return self.prefix_counts[self.n_sentinels:]

    def collapsed(self) -> list[int]:
        return collapse(self.path, self.blank_id)

    def append_frame_id(self, tid: int) -> "CtcAlignment":
        """Extend with one frame's argmax id, keeping counts incremental."""
        if tid == self.blank_id:
            self.last_emit = None  # blank resets the repeat-merge state
            self.prefix_counts.append(self.count)
        elif tid == self.last_emit:
            self.prefix_counts.append(self.count)
        else:
            self.prefix_counts.append(self.count + 1)
            self.last_emit = tid
        self.path.append(tid)
        return self


def _decode_columns(vocab: MultimodalVocab) -> np.ndarray:
    # CTC emissions are text or blank; unit columns never decode.
    return np.concatenate([np.arange(vocab.text_size), [vocab.blank_id]])


def ctc_frame_argmax(frame_logits, vocab: MultimodalVocab) -> int:
    """Argmax of one frame restricted to text/blank columns, lowest id wins ties."""
    row = frame_logits.data if isinstance(frame_logits, Tensor) else np.asarray(frame_logits)
    cols = _decode_columns(vocab)
    return int(cols[int(np.argmax(row[cols]))])


def ctc_greedy_decode(logits, vocab: MultimodalVocab) -> CtcAlignment:
    """Per-frame argmax path over [T, |V|] logits with incremental collapse."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 2:
        raise ShapeError(f"ctc_greedy_decode expects [T, V] logits, got {arr.shape}")
    align = CtcAlignment.empty(vocab.blank_id)
    cols = _decode_columns(vocab)
    if arr.shape[0]:
        picks = cols[np.argmax(arr[:, cols], axis=1)]
        for tid in picks:
            align.append_frame_id(int(tid))
    return align


def extend_alignment(align: CtcAlignment, new_frame_logits, vocab: MultimodalVocab) -> CtcAlignment:
    """Append one frame of logits to a running alignment."""
    return align.append_frame_id(ctc_frame_argmax(new_frame_logits, vocab))


def remove_blanks(h: Tensor, align: CtcAlignment) -> Tensor:
    """Keep exactly the rows of h whose path id is non-blank, order preserved."""
    path = align.content_path()
    if h.shape[0] != len(path):
        raise ShapeError(f"hidden rows {h.shape[0]} vs alignment length {len(path)}")
    keep = np.asarray([i for i, t in enumerate(path) if t != align.blank_id], dtype=np.int64)
    return h[keep]


def adjacent_repeats(target: Sequence[int]) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    """A path of n_frames can collapse to target iff it fits repeats + blanks."""
    return n_frames >= len(target) + adjacent_repeats(target)


def _extended_target(target: Sequence[int], blank_id: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank_id, dtype=np.int64)
    ext[1::2] = target
    return ext


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Elementwise log(exp(a) + exp(b) + exp(c)); -inf entries drop out."""
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isneginf(m), 0.0, m)
    acc = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
    with np.errstate(divide="ignore"):
        return np.where(np.isneginf(m), NEG_INF, safe + np.log(acc))


def ctc_loss(logits: Tensor, target: Sequence[int], vocab: MultimodalVocab) -> Tensor:
    """-log sum of path probabilities collapsing to `target`.

    logits: [T, |V|] unnormalized scores over the full multimodal vocab;
    target: text ids. Infeasible targets (too few frames) yield an +inf
    loss detached from the graph, the caller's cue to skip the sample.
    """
    if logits.ndim != 2 or logits.shape[1] != vocab.total_size:
        raise ShapeError(f"ctc_loss expects [T, {vocab.total_size}] logits, got {logits.shape}")
    target = [int(t) for t in target]
    for t in target:
        if not vocab.is_text(t):
            raise ConfigError(f"ctc target id {t} is not a text token")
    T = logits.shape[0]
    if not ctc_feasible(T, target):
        return Tensor(np.inf, dtype=logits.dtype)
    if T == 0:
        return Tensor(0.0, dtype=logits.dtype)

    ext = _extended_target(target, vocab.blank_id)
    S = len(ext)
    x = logits.data
    mx = x.max(axis=-1, keepdims=True)
    logp = (x - mx) - np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))
    lp = logp[:, ext]  # [T, S] log prob of each extended-target state per frame

    # transition s-2 -> s is legal when ext[s] is a label differing from ext[s-2]
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = (ext[2:] != vocab.blank_id) & (ext[2:] != ext[:-2])

    alphas = np.full((T, S), NEG_INF)
    alphas[0, 0] = lp[0, 0]
    if S > 1:
        alphas[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alphas[t - 1]
        step = np.concatenate([[NEG_INF], prev[:-1]])
        skip = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])
        skip = np.where(skip_ok, skip, NEG_INF)
        alphas[t] = _lse3(prev, step, skip) + lp[t]

    tail = alphas[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alphas[T - 1, S - 2])
    loss = -tail

    def bwd(g):
        if not logits.requires_grad:
            return
        betas = np.full((T, S), NEG_INF)
        betas[T - 1, S - 1] = 0.0
        if S > 1:
            betas[T - 1, S - 2] = 0.0
        allow = np.concatenate([skip_ok[2:], [False, False]])
        for t in range(T - 2, -1, -1):
            nxt = betas[t + 1] + lp[t + 1]
            step = np.concatenate([nxt[1:], [NEG_INF]])
            skip = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])
            skip = np.where(allow, skip, NEG_INF)
            betas[t] = _lse3(nxt, step, skip)

        gamma = alphas + betas + loss  # log occupancy, rows sum to 1
        occ = np.zeros_like(x)
        expg = np.exp(gamma)
        for s in range(S):
            occ[:, ext[s]] += expg[:, s]
        y = np.exp(logp)
        accumulate(logits, (y - occ) * float(g))

    return op_node(np.asarray(loss), (logits,), bwd, "ctc_loss")


def ctc_loss_bruteforce(logits, target: Sequence[int], vocab: MultimodalVocab) -> float:
    """Exhaustive-enumeration oracle for the CTC loss.

    Sums softmax path probabilities over every frame labeling drawn from
    target's symbols plus blank that collapses to target. Exponential in T;
    only for small cases.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    T = arr.shape[0]
    target = [int(t) for t in target]
    mx = arr.max(axis=-1, keepdims=True) if T else arr
    logp = (arr - mx) - np.log(np.exp(arr - mx).sum(axis=-1, keepdims=True)) if T else arr
    total = 0.0
    for path in ctc_valid_paths(target, T, vocab):
        total += float(np.exp(sum(logp[t, path[t]] for t in range(T))))
    if total == 0.0:
        return float("inf")
    return -float(np.log(total))


def ctc_valid_paths(target: Sequence[int], n_frames: int, vocab: MultimodalVocab):
    """Yield every path of length n_frames whose collapse equals target.

    Any such path uses only target's symbols and blank, so enumeration over
    that alphabet is exhaustive.
    """
    target = [int(t) for t in target]
    alphabet = sorted(set(target)) + [vocab.blank_id]
    for path in product(alphabet, repeat=n_frames):
        if collapse(path, vocab.blank_id) == target:
            yield list(path)
