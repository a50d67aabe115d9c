"""Three-stack decoder-only transformer with alignment-gated text-to-speech.

The stack order is: bottom speech layers (speech units in, CTC head out),
core language layers (multimodal context in, text head out), top speech
layers (unit representations fused with text representations, unit head
out). One shared embedding table covers the whole multimodal vocabulary.
Rotary positions restart per stack, so streaming lengths are unbounded.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .ctc import CtcAlignment
from .errors import ConfigError, SchedulingError, ShapeError
from .numerics import Tensor
from .vocab import MultimodalVocab, build_vocab

FUSION_TYPES = ("attention", "add_input", "add_per_layer")

INF_WINDOW = math.inf


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    n_core_layers: int = 4
    n_bottom_layers: int = 2
    n_top_layers: int = 2
    text_size: int = 64
    unit_size: int = 32
    fusion_type: str = "attention"
    fusion_window: float = 5
    wait_k: int = 3
    max_units_per_token: int = 20
    max_text_tokens: int = 48
    vision_feature_dim: int = 32
    vision_tokens_per_image: int = 16
    top_input_mode: str = "bottom"  # "bottom": re-encode generated units; "embed": raw embeddings
    remove_input_blanks: bool = False
    precision: str = "f64"
    rope_base: float = 10000.0

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("n_core_layers", "n_bottom_layers", "n_top_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (self.fusion_window == INF_WINDOW or
                (float(self.fusion_window).is_integer() and self.fusion_window >= 1)):
            raise ConfigError(f"fusion_window must be a positive integer or inf, got {self.fusion_window}")
        if self.wait_k < 1:
            raise ConfigError(f"wait_k must be >= 1, got {self.wait_k}")
        if self.fusion_type not in FUSION_TYPES:
            raise ConfigError(f"unknown fusion type {self.fusion_type!r}; choose from {FUSION_TYPES}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be f64 or f32, got {self.precision}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_total(self) -> int:
        return self.text_size + self.unit_size + 1

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["fusion_window"] == INF_WINDOW:
            d["fusion_window"] = "inf"
        else:
            d["fusion_window"] = int(d["fusion_window"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        w = d.get("fusion_window", 5)
        d["fusion_window"] = INF_WINDOW if w in ("inf", None) else float(w)
        return cls(**d).validate()


def fusion_window(align_count: int, window, text_len: int) -> tuple[int, int]:
    """Inclusive 1-based text-position range the fusion may attend to.

    With N text tokens already recognized in the generated units, the window
    ends at position N+1 and reaches back W-1 positions, clamped at 1.
    """
    if align_count < 0:
        raise ConfigError(f"alignment count must be >= 0, got {align_count}")
    hi = align_count + 1
    if hi > text_len:
        raise SchedulingError(
            f"fusion window ends at text position {hi} but only {text_len} generated")
    if window == INF_WINDOW:
        return 1, hi
    w = int(window)
    if w < 1:
        raise ConfigError(f"fusion window must be >= 1, got {window}")
    return max(1, hi + 1 - w), hi


# -- parameter containers -----------------------------------------------------


@dataclass
class Block:
    """One transformer block: attention + FFN, RMS-normed, residual."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_attn: Tensor
    w1: Tensor
    w2: Tensor
    norm_ffn: Tensor
    fuse: Optional[dict] = None  # cross-attention fusion weights (top stack, attention mode)


@dataclass
class LayerKV:
    k: Optional[np.ndarray] = None  # [B, H, T, hd]
    v: Optional[np.ndarray] = None

    def extend(self, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.k = k_new if self.k is None else np.concatenate([self.k, k_new], axis=2)
        self.v = v_new if self.v is None else np.concatenate([self.v, v_new], axis=2)
        return self.k, self.v


class StackCache:
    """Per-layer KV caches for incremental decoding of one stack."""

    def __init__(self, n_layers: int):
        self.kv = [LayerKV() for _ in range(n_layers)]
        self.length = 0
        # cross-attention caches (top stack only): projected text rows per layer
        self.text_kv: list[LayerKV] = [LayerKV() for _ in range(n_layers)]
        self.text_len = 0


class SessionCache:
    """All caches one live session needs: one per stack, plus a second
    bottom-stack cache for the model's own generated units."""

    def __init__(self, config: ModelConfig):
        self.bottom = StackCache(config.n_bottom_layers)
        self.gen_bottom = StackCache(config.n_bottom_layers)
        self.core = StackCache(config.n_core_layers)
        self.top = StackCache(config.n_top_layers)


# -- the model ----------------------------------------------------------------


class Model:
    """Parameters plus forward passes for the three stacks."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config.validate()
        self.vocab: MultimodalVocab = build_vocab(config.text_size, config.unit_size)
        if rng is None:
            rng = np.random.default_rng(0)
        self._build_params(rng)
        self._rope_cache: dict = {}

    # -- parameters ----------------------------------------------------------

    def _param(self, rng, shape, std=0.02) -> Tensor:
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True,
                      dtype=self.config.dtype)

    def _ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True, dtype=self.config.dtype)

    def _zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True, dtype=self.config.dtype)

    def _build_params(self, rng) -> None:
        cfg = self.config
        d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
        self.embed = self._param(rng, (cfg.vocab_total, d))
        self.stacks: dict[str, list[Block]] = {}
        for stack, n in (("bottom", cfg.n_bottom_layers),
                         ("core", cfg.n_core_layers),
                         ("top", cfg.n_top_layers)):
            blocks = []
            for _ in range(n):
                blk = Block(
                    wq=self._param(rng, (d, d)), wk=self._param(rng, (d, d)),
                    wv=self._param(rng, (d, d)), wo=self._param(rng, (d, d)),
                    norm_attn=self._ones(d),
                    w1=self._param(rng, (d, f)), w2=self._param(rng, (f, d)),
                    norm_ffn=self._ones(d),
                )
                if stack == "top" and cfg.fusion_type == "attention":
                    blk.fuse = {
                        "wq": self._param(rng, (d, d)), "wk": self._param(rng, (d, d)),
                        "wv": self._param(rng, (d, d)), "wo": self._param(rng, (d, d)),
                        "norm": self._ones(d),
                    }
                blocks.append(blk)
            self.stacks[stack] = blocks
        self.norm_out = {s: self._ones(d) for s in ("bottom", "core", "top")}
        self.ctc_head_w = self._param(rng, (d, cfg.vocab_total))
        self.ctc_head_b = self._zeros(cfg.vocab_total)
        self.text_head_w = self._param(rng, (d, cfg.text_size))
        self.text_head_b = self._zeros(cfg.text_size)
        self.unit_head_w = self._param(rng, (d, cfg.unit_size + 1))  # +1 = unit-eos
        self.unit_head_b = self._zeros(cfg.unit_size + 1)
        self.vision_w1 = self._param(rng, (cfg.vision_feature_dim, d))
        self.vision_b1 = self._zeros(d)
        self.vision_w2 = self._param(rng, (d, d))
        self.vision_b2 = self._zeros(d)
        self.speech_sos = self._param(rng, (d,))

    @property
    def unit_eos(self) -> int:
        """Unit-head-local index of the end-of-speech symbol."""
        return self.config.unit_size

    def parameters(self) -> dict[str, Tensor]:
        """Name -> tensor, in a stable order (checkpoint layout)."""
        out: dict[str, Tensor] = {"embed": self.embed}
        for stack, blocks in self.stacks.items():
            for i, blk in enumerate(blocks):
                p = f"{stack}.{i}"
                out[f"{p}.attn.wq"] = blk.wq
                out[f"{p}.attn.wk"] = blk.wk
                out[f"{p}.attn.wv"] = blk.wv
                out[f"{p}.attn.wo"] = blk.wo
                out[f"{p}.norm_attn"] = blk.norm_attn
                out[f"{p}.ffn.w1"] = blk.w1
                out[f"{p}.ffn.w2"] = blk.w2
                out[f"{p}.norm_ffn"] = blk.norm_ffn
                if blk.fuse is not None:
                    for nm_, t in blk.fuse.items():
                        out[f"{p}.fuse.{nm_}"] = t
        for s in ("bottom", "core", "top"):
            out[f"{s}.norm_out"] = self.norm_out[s]
        out["ctc_head.w"] = self.ctc_head_w
        out["ctc_head.b"] = self.ctc_head_b
        out["text_head.w"] = self.text_head_w
        out["text_head.b"] = self.text_head_b
        out["unit_head.w"] = self.unit_head_w
        out["unit_head.b"] = self.unit_head_b
        out["vision.w1"] = self.vision_w1
        out["vision.b1"] = self.vision_b1
        out["vision.w2"] = self.vision_w2
        out["vision.b2"] = self.vision_b2
        out["speech_sos"] = self.speech_sos
        return out

    def load_arrays(self, arrays: dict) -> None:
        """Overwrite parameter values from name -> ndarray (checkpoint load)."""
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in params.items():
            a = np.asarray(arrays[name], dtype=self.config.dtype)
            if a.shape != t.shape:
                raise ConfigError(f"parameter {name} shape {a.shape} vs expected {t.shape}")
            t.data = a

    # -- rotary positions ------------------------------------------------------

    def _rope(self, positions: np.ndarray) -> tuple[Tensor, Tensor]:
        """cos/sin tables gathered at `positions` [..] -> [.., head_dim]."""
        hd = self.config.head_dim
        half = hd // 2
        need = int(positions.max()) + 1 if positions.size else 1
        table = self._rope_cache.get("table")
        if table is None or table[0].shape[0] < need:
            n = max(need, 128)
            freqs = self.config.rope_base ** (-np.arange(half) * 2.0 / hd)
            ang = np.arange(n)[:, None] * freqs[None, :]
            cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
            sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
            table = (cos.astype(self.config.dtype), sin.astype(self.config.dtype))
            self._rope_cache["table"] = table
        cos, sin = table
        return (Tensor(cos[positions], dtype=self.config.dtype),
                Tensor(sin[positions], dtype=self.config.dtype))

    @staticmethod
    def _rotate_half(x: Tensor) -> Tensor:
        half = x.shape[-1] // 2
        a = x[..., :half]
        b = x[..., half:]
        return nm.concat([nm.neg(b), a], axis=-1)

    def _apply_rope(self, x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
        # x [B, H, T, hd]; cos/sin [B, T, hd] -> broadcast over heads
        c = reshape_for_heads(cos)
        s = reshape_for_heads(sin)
        return nm.add(nm.mul(x, c), nm.mul(self._rotate_half(x), s))

    # -- transformer internals -------------------------------------------------

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.config.n_heads
        return nm.permute(nm.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, hd = x.shape
        return nm.reshape(nm.permute(x, (0, 2, 1, 3)), (b, t, h * hd))

    def _self_attention(self, blk: Block, x: Tensor, mask: np.ndarray,
                        positions: np.ndarray, cache_kv: Optional[LayerKV]) -> Tensor:
        xn = nm.rms_norm(x, blk.norm_attn)
        q = self._split_heads(nm.matmul(xn, blk.wq))
        k = self._split_heads(nm.matmul(xn, blk.wk))
        v = self._split_heads(nm.matmul(xn, blk.wv))
        cos, sin = self._rope(positions)
        q = self._apply_rope(q, cos, sin)
        k = self._apply_rope(k, cos, sin)
        if cache_kv is not None:
            kf, vf = cache_kv.extend(k.data, v.data)
            k = Tensor(kf, dtype=k.dtype)
            v = Tensor(vf, dtype=v.dtype)
        out = nm.masked_attention(q, k, v, mask)
        return nm.matmul(self._merge_heads(out), blk.wo)

    def _cross_fusion(self, blk: Block, x: Tensor, h_text: Tensor,
                      window_mask: np.ndarray, text_cache: Optional[LayerKV],
                      n_new_text: int) -> Tensor:
        fa = blk.fuse
        xn = nm.rms_norm(x, fa["norm"])
        q = self._split_heads(nm.matmul(xn, fa["wq"]))
        if text_cache is not None:
            if n_new_text:
                new_rows = h_text[:, h_text.shape[1] - n_new_text:, :]
                kn = self._split_heads(nm.matmul(new_rows, fa["wk"]))
                vn = self._split_heads(nm.matmul(new_rows, fa["wv"]))
                text_cache.extend(kn.data, vn.data)
            k = Tensor(text_cache.k, dtype=x.dtype)
            v = Tensor(text_cache.v, dtype=x.dtype)
        else:
            k = self._split_heads(nm.matmul(h_text, fa["wk"]))
            v = self._split_heads(nm.matmul(h_text, fa["wv"]))
        out = nm.masked_attention(q, k, v, window_mask)
        return nm.matmul(self._merge_heads(out), fa["wo"])

    def _ffn(self, blk: Block, x: Tensor) -> Tensor:
        xn = nm.rms_norm(x, blk.norm_ffn)
        return nm.matmul(nm.silu(nm.matmul(xn, blk.w1)), blk.w2)

    def _stack_hidden(self, stack: str, x: Tensor, mask: np.ndarray,
                      positions: np.ndarray, cache: Optional[StackCache] = None,
                      fusion: Optional[dict] = None) -> Tensor:
        """Run one stack over x [B, T, d]; returns normed hidden states.

        `fusion`, when given (top stack), carries h_text / window_mask /
        aligned rows for the configured fusion type.
        """
        cfg = self.config
        for i, blk in enumerate(self.stacks[stack]):
            kvc = cache.kv[i] if cache is not None else None
            x = nm.add(x, self._self_attention(blk, x, mask, positions, kvc))
            if fusion is not None:
                if cfg.fusion_type == "attention":
                    tc = cache.text_kv[i] if cache is not None else None
                    x = nm.add(x, self._cross_fusion(
                        blk, x, fusion["h_text"], fusion["window_mask"], tc,
                        fusion.get("n_new_text", 0)))
                elif cfg.fusion_type == "add_per_layer":
                    x = nm.add(x, fusion["aligned"])
            x = nm.add(x, self._ffn(blk, x))
        if fusion is not None and cfg.fusion_type == "attention" and cache is not None:
            cache.text_len = fusion["h_text"].shape[1]
        return nm.rms_norm(x, self.norm_out[stack])

    # -- public single-sequence ops ---------------------------------------------

    def embed_ids(self, ids) -> Tensor:
        return nm.embedding(self.embed, np.asarray(ids, dtype=np.int64))

    def bottom_forward(self, units: Sequence[int], cache: Optional[StackCache] = None) -> Tensor:
        """Encode speech units [T] -> hidden rows [T, d_model]."""
        units = [int(u) for u in units]
        for u in units:
            if not self.vocab.is_unit(u):
                raise ConfigError(f"bottom stack input id {u} is not a speech unit")
        t = len(units)
        if t == 0 and cache is None:
            return Tensor(np.zeros((0, self.config.d_model)), dtype=self.config.dtype)
        x = nm.reshape(self.embed_ids(units), (1, t, self.config.d_model))
        offset = cache.length if cache is not None else 0
        positions = np.arange(offset, offset + t)[None, :]
        mask = causal_mask(t, offset + t)
        h = self._stack_hidden("bottom", x, mask, positions, cache)
        if cache is not None:
            cache.length += t
        return nm.reshape(h, (t, self.config.d_model))

    def ctc_logits(self, h: Tensor) -> Tensor:
        return nm.add(nm.matmul(h, self.ctc_head_w), self.ctc_head_b)

    def vision_encode(self, features) -> Tensor:
        """Project vision features [n_tokens, feat_dim] into model width."""
        f = features if isinstance(features, Tensor) else Tensor(features, dtype=self.config.dtype)
        want = (self.config.vision_tokens_per_image, self.config.vision_feature_dim)
        if f.shape != want:
            raise ShapeError(f"vision features shape {f.shape}, expected {want}")
        h = nm.silu(nm.add(nm.matmul(f, self.vision_w1), self.vision_b1))
        return nm.add(nm.matmul(h, self.vision_w2), self.vision_b2)

    def core_forward(self, context: Tensor,
                     cache: Optional[StackCache] = None) -> tuple[Tensor, Tensor]:
        """Run the core over context rows [T, d]; returns (hidden [T, d],
        text logits at the last position [text_size])."""
        t = context.shape[0]
        if t == 0:
            raise ConfigError("core_forward called with an empty context")
        x = nm.reshape(context, (1, t, self.config.d_model))
        offset = cache.length if cache is not None else 0
        positions = np.arange(offset, offset + t)[None, :]
        mask = causal_mask(t, offset + t)
        h = self._stack_hidden("core", x, mask, positions, cache)
        if cache is not None:
            cache.length += t
        h = nm.reshape(h, (t, self.config.d_model))
        logits = nm.add(nm.matmul(h[t - 1:t], self.text_head_w), self.text_head_b)
        return h, nm.reshape(logits, (self.config.text_size,))

    def text_logits(self, h: Tensor) -> Tensor:
        return nm.add(nm.matmul(h, self.text_head_w), self.text_head_b)

    def unit_logits(self, h: Tensor) -> Tensor:
        return nm.add(nm.matmul(h, self.unit_head_w), self.unit_head_b)

    def top_forward(self, h_units: Optional[Tensor], h_text: Tensor,
                    align: CtcAlignment, cache: Optional[StackCache] = None,
                    window=None) -> Tensor:
        """Next-unit logits from generated-unit encodings and text hiddens.

        Full mode (cache None): h_units holds all M generated-unit rows; a
        learned start row is prepended and logits for unit M+1 come back.
        Incremental mode: pass only the rows not yet consumed (none on the
        first call), with h_text grown to all text rows so far. `window`
        overrides the configured fusion window for this call.
        """
        cfg = self.config
        d = cfg.d_model
        win = cfg.fusion_window if window is None else window
        sos = nm.reshape(self.speech_sos, (1, 1, d))
        counts = align.content_counts()
        if cache is None:
            m = 0 if h_units is None else h_units.shape[0]
            if len(counts) < m:
                raise ConfigError(f"alignment covers {len(counts)} units, got {m} rows")
            rows = [sos] if m == 0 else [sos, nm.reshape(h_units, (1, m, d))]
            x = nm.concat(rows, axis=1)
            pos_counts = [0] + counts[:m]
            offset = 0
        else:
            m = 0 if h_units is None else h_units.shape[0]
            offset = cache.length
            if offset == 0:
                if m != 0:
                    raise ConfigError("first incremental top_forward call must start from the sos row")
                x = sos
                pos_counts = [0]
            else:
                if m != 1:
                    raise ConfigError("incremental top_forward consumes one new unit row per call")
                x = nm.reshape(h_units, (1, 1, d))
                pos_counts = [align.count]
        t_new = x.shape[1]
        text_len = h_text.shape[0]
        windows = [fusion_window(c, win, text_len) for c in pos_counts]
        positions = np.arange(offset, offset + t_new)[None, :]
        mask = causal_mask(t_new, offset + t_new)
        h_text_b = nm.reshape(h_text, (1, text_len, d))
        fusion: Optional[dict] = None
        if cfg.fusion_type == "attention":
            wmask = np.zeros((1, 1, t_new, text_len), dtype=bool)
            for j, (lo, hi) in enumerate(windows):
                wmask[0, 0, j, lo - 1:hi] = True
            n_new_text = text_len - (cache.text_len if cache is not None else text_len)
            fusion = {"h_text": h_text_b, "window_mask": wmask, "n_new_text": n_new_text}
        else:
            idx = np.asarray([hi - 1 for _, hi in windows], dtype=np.int64)
            aligned = nm.reshape(h_text[idx], (1, t_new, d))
            if cfg.fusion_type == "add_input":
                x = nm.add(x, aligned)
                fusion = None
            else:
                fusion = {"aligned": aligned}
        h = self._stack_hidden("top", x, mask, positions, cache, fusion)
        if cache is not None:
            cache.length += t_new
        logits = self.unit_logits(h[:, t_new - 1, :])
        return nm.reshape(logits, (cfg.unit_size + 1,))

    def new_session_cache(self) -> SessionCache:
        return SessionCache(self.config)

    # -- batched training paths ---------------------------------------------------

    def bottom_hidden_batched(self, unit_ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """unit_ids [B, T] (right-padded, pad slots hold any valid unit id)."""
        b, t = unit_ids.shape
        x = self.embed_ids(unit_ids)
        mask = batch_causal_mask(t, t, lengths)
        positions = np.broadcast_to(np.arange(t), (b, t))
        return self._stack_hidden("bottom", x, mask, positions)

    def core_hidden_batched(self, x: Tensor, real: np.ndarray) -> Tensor:
        """x [B, T, d] with `real` [B, T] marking non-pad rows."""
        positions = np.maximum(np.cumsum(real, axis=1) - 1, 0)
        mask = key_causal_mask(real)
        return self._stack_hidden("core", x, mask, positions)

    def top_hidden_batched(self, x_units: Tensor, h_text: Tensor, counts: np.ndarray,
                           unit_lens: np.ndarray, text_lens: np.ndarray) -> Tensor:
        """Teacher-forced top stack.

        x_units [B, Tu, d] rows ([sos, enc(u_1) .. enc(u_M)] padded);
        h_text [B, Tt, d]; counts [B, Tu] alignment counts per position
        (pre-clamped so count+1 <= text_len); unit_lens counts real rows.
        """
        cfg = self.config
        b, tu, _ = x_units.shape
        tt = h_text.shape[1]
        mask = batch_causal_mask(tu, tu, unit_lens)
        positions = np.broadcast_to(np.arange(tu), (b, tu))
        if np.any(counts + 1 > text_lens[:, None]):
            raise SchedulingError("fusion counts run past the available text rows")
        his = counts + 1  # [B, Tu], 1-based window end
        if cfg.fusion_type == "attention":
            w = cfg.fusion_window
            los = np.ones_like(his) if w == INF_WINDOW else np.maximum(1, his + 1 - int(w))
            tpos = np.arange(tt)[None, None, :]
            wmask = (tpos >= (los - 1)[:, :, None]) & (tpos <= (his - 1)[:, :, None])
            wmask = wmask[:, None, :, :]
            fusion = {"h_text": h_text, "window_mask": wmask, "n_new_text": 0}
        else:
            rows = np.arange(b)[:, None]
            aligned = h_text[rows, his - 1]
            if cfg.fusion_type == "add_input":
                x_units = nm.add(x_units, aligned)
                fusion = None
            else:
                fusion = {"aligned": aligned}
        return self._stack_hidden("top", x_units, mask, positions, None, fusion)


# -- mask helpers ---------------------------------------------------------------


def causal_mask(t_new: int, t_total: int) -> np.ndarray:
    """[t_new, t_total] boolean mask: query i sees keys <= offset + i."""
    offset = t_total - t_new
    q = np.arange(t_new)[:, None] + offset
    k = np.arange(t_total)[None, :]
    return k <= q


def batch_causal_mask(t_new: int, t_total: int, lengths: np.ndarray) -> np.ndarray:
    """Causal mask plus key padding: [B, 1, t_new, t_total]."""
    base = causal_mask(t_new, t_total)[None, None]
    keys = np.arange(t_total)[None, None, None, :] < lengths[:, None, None, None]
    return base & keys


def key_causal_mask(real: np.ndarray) -> np.ndarray:
    """Causal mask restricted to real (non-pad) keys; real is [B, T] of 0/1."""
    b, t = real.shape
    base = causal_mask(t, t)[None, None]
    keys = real.astype(bool)[:, None, None, :]
    mask = base & keys
    # a pad query row could end up with no allowed key; let it see itself
    diag = np.eye(t, dtype=bool)[None, None]
    empty = ~mask.any(axis=-1, keepdims=True)
    return mask | (diag & empty)


def reshape_for_heads(x: Tensor) -> Tensor:
    """[B, T, hd] -> [B, 1, T, hd] so rope tables broadcast over heads."""
    b, t, hd = x.shape
    return nm.reshape(x, (b, 1, t, hd))
