"""Three-stage training with stage-wise trainable-module masks.

Stage 1 aligns vision and text (projection + core trainable), stage 2
aligns speech and text (bottom/top speech stacks, CTC and unit heads, with
text representations teacher-forced through the frozen core), stage 3
trains the core alone on the mixed multimodal task set. The Trainable
Modules column of the stage table is enforced: parameters outside a
stage's set stay bit-identical.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .ctc import ctc_feasible, ctc_greedy_decode, ctc_loss
from .data import CorpusRecord
from .errors import ConfigError, DataError, NumericError
from .model import Model
from .numerics import Tensor, no_grad
from .vocab import BOS_ID, EOS_ID, PAD_ID

log = logging.getLogger("tristream.training")

STAGE1_TASKS = ("T2T", "VT2T")
STAGE2_ASR_TASKS = ("ASR",)
STAGE2_GEN_TASKS = ("S2S", "VS2S")
STAGE3_TASKS = ("T2T", "S2T", "S2S", "VT2T", "VS2T", "VS2S")


@dataclass
class StageConfig:
    stage: int
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 20
    clip: float = 1.0
    weight_decay: float = 0.01
    lam_ctc: float = 1.0
    lam_unit: float = 1.0
    seed: int = 0
    log_every: int = 50
    eval_limit: int = 150
    # stage 2 only: perturbations of the teacher text representations, so
    # the fusion readout survives the core updates stage 3 applies later;
    # noise is i.i.d. additive, distort is a per-batch linear warp
    h_text_noise: float = 0.0
    h_text_distort: float = 0.0
    # stage 3 only: separate rate for the text head. The head is pure
    # readout (the fusion never sees it), so it can move fast while the
    # core, whose hidden states the top stack reads, moves gently.
    lr_head: float = 0.0

    @classmethod
    def default_for(cls, stage: int, seed: int = 0) -> "StageConfig":
        if stage == 1:
            return cls(stage=1, steps=350, lr=3e-3, seed=seed)
        if stage == 2:
            return cls(stage=2, steps=900, lr=3e-3, seed=seed,
                       h_text_noise=0.5, h_text_distort=1.0)
        if stage == 3:
            return cls(stage=3, steps=300, lr=5e-5, lr_head=3e-3, seed=seed)
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")


@dataclass
class TrainReport:
    stage: int
    losses: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_s: float = 0.0
    skipped: int = 0

    def step_records(self) -> list[dict]:
        return [{"step": i, "loss": round(float(l), 6)} for i, l in enumerate(self.losses)]

    def write_jsonl(self, path) -> None:
        import json
        with open(path, "w") as fh:
            for rec in self.step_records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            fh.write(json.dumps({"stage": self.stage, "final": self.final,
                                 "wall_s": round(self.wall_s, 3),
                                 "skipped": self.skipped},
                                separators=(",", ":")) + "\n")


# -- trainable-set selection -------------------------------------------------


def stage_trainable(model: Model, stage: int) -> dict[str, Optional[np.ndarray]]:
    """Name -> row mask (None = whole tensor) for the stage's trainable set.

    The shared embedding table is split by id range: text rows ride with the
    core (stages 1 and 3), unit and blank rows with the speech stacks
    (stage 2).
    """
    cfg = model.config
    text_rows = np.zeros(cfg.vocab_total, dtype=bool)
    text_rows[:cfg.text_size] = True
    if stage == 1:
        prefixes = ("core.", "text_head.", "vision.")
        embed_mask = text_rows
    elif stage == 2:
        prefixes = ("bottom.", "top.", "ctc_head.", "unit_head.", "speech_sos")
        embed_mask = ~text_rows
    elif stage == 3:
        # core only; the embedding stays where stages 1/2 left it so the
        # speech stacks keep reading a stable text space
        prefixes = ("core.", "text_head.")
        embed_mask = None
    else:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    sel: dict[str, Optional[np.ndarray]] = {}
    for name in model.parameters():
        if name == "embed":
            if embed_mask is not None:
                sel[name] = embed_mask
        elif name.startswith(prefixes):
            sel[name] = None
    return sel


def apply_stage_masks(model: Model, sel: dict) -> None:
    for name, t in model.parameters().items():
        t.requires_grad = name in sel
        t.grad = None


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam with linear warmup, global-norm clipping,
    and optional per-row update masks (for the split embedding table)."""

    def __init__(self, named: dict[str, tuple[Tensor, Optional[np.ndarray]]],
                 lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, warmup: int = 0, clip: float = 1.0,
                 lr_overrides: Optional[dict[str, float]] = None):
        self.named = named
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.warmup = warmup
        self.clip = clip
        self.lr_overrides = lr_overrides or {}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, (p, _) in named.items()}
        self.v = {k: np.zeros_like(p.data) for k, (p, _) in named.items()}

    def zero_grad(self) -> None:
        for p, _ in self.named.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        self.t += 1
        ramp = min(1.0, self.t / self.warmup) if self.warmup else 1.0
        grads = {}
        sq = 0.0
        for k, (p, mask) in self.named.items():
            if p.grad is None:
                continue
            g = p.grad
            if mask is not None:
                g = g.copy()
                g[~mask] = 0.0
            grads[k] = g
            sq += float((g * g).sum())
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.clip and norm > self.clip:
            scale = self.clip / (norm + 1e-12)
        for k, g in grads.items():
            p, mask = self.named[k]
            g = g * scale
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.wd and p.data.ndim >= 2:
                upd = upd + self.wd * p.data
            upd = self.lr_overrides.get(k, self.lr) * ramp * upd
            if mask is not None:
                upd = upd * mask[(...,) + (None,) * (p.data.ndim - 1)]
            p.data = p.data - upd
        return norm


# -- batch assembly -------------------------------------------------------------


def _pad_ids(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    lens = np.asarray([len(s) for s in seqs], dtype=np.int64)
    t = int(lens.max()) if len(lens) else 0
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lens


def _vision_project(model: Model, blocks: np.ndarray) -> Tensor:
    """blocks [B, n_tokens, feat_dim] -> [B, n_tokens, d_model]."""
    f = Tensor(blocks, dtype=model.config.dtype)
    h = nm.silu(nm.add(nm.matmul(f, model.vision_w1), model.vision_b1))
    return nm.add(nm.matmul(h, model.vision_w2), model.vision_b2)


def _context_pieces(model: Model, records: Sequence[CorpusRecord], text_ids: np.ndarray,
                    text_lens: np.ndarray, bottom_grad: bool):
    """Assemble [vision : speech : text] context rows for a task-uniform batch.

    Returns (ctx [B, T, d], real [B, T], text_offset).
    """
    b = len(records)
    for r in records:
        if ((r.vision_features is None) != (records[0].vision_features is None)
                or (r.input_units is None) != (records[0].input_units is None)):
            raise DataError("batch mixes records with different modality layouts")
    pieces = []
    reals = []
    if records[0].vision_features is not None:
        blocks = np.stack([r.vision_features for r in records]).astype(model.config.dtype)
        if bottom_grad:
            vis = _vision_project(model, blocks)
        else:
            with no_grad():
                vis = _vision_project(model, blocks)
        pieces.append(vis)
        reals.append(np.ones((b, vis.shape[1]), dtype=np.int64))
    if records[0].input_units is not None:
        pad_unit = model.vocab.unit_global(0)
        unit_ids, unit_lens = _pad_ids([r.input_units for r in records], pad_unit)
        if bottom_grad:
            uh = model.bottom_hidden_batched(unit_ids, unit_lens)
        else:
            with no_grad():
                uh = model.bottom_hidden_batched(unit_ids, unit_lens)
        pieces.append(uh)
        reals.append((np.arange(unit_ids.shape[1])[None, :] < unit_lens[:, None]).astype(np.int64))
    pieces.append(model.embed_ids(text_ids))
    reals.append((np.arange(text_ids.shape[1])[None, :] < text_lens[:, None]).astype(np.int64))
    offset = sum(p.shape[1] for p in pieces[:-1])
    return nm.concat(pieces, axis=1), np.concatenate(reals, axis=1), offset


def text_task_loss(model: Model, records: Sequence[CorpusRecord],
                   bottom_grad: bool = False) -> Tensor:
    """Cross-entropy of the target text given [vision : speech : prompt : bos].

    The batch must be task-uniform (same optional fields everywhere).
    """
    b = len(records)
    prompts = [list(r.input_text or []) for r in records]
    resps = [list(r.target_text) for r in records]
    text_seqs = [p + [BOS_ID] + r for p, r in zip(prompts, resps)]
    text_ids, text_lens = _pad_ids(text_seqs, PAD_ID)
    ctx, real, off = _context_pieces(model, records, text_ids, text_lens, bottom_grad)
    h = model.core_hidden_batched(ctx, real)
    logits = model.text_logits(h)
    t_total = ctx.shape[1]
    targets = np.zeros((b, t_total), dtype=np.int64)
    mask = np.zeros((b, t_total), dtype=model.config.dtype)
    for i, (p, r) in enumerate(zip(prompts, resps)):
        start = off + len(p)
        labels = r + [EOS_ID]
        targets[i, start:start + len(labels)] = labels
        mask[i, start:start + len(labels)] = 1.0
    flat = nm.reshape(logits, (b * t_total, model.config.text_size))
    return nm.cross_entropy(flat, targets.reshape(-1), mask.reshape(-1))


def asr_ctc_loss(model: Model, records: Sequence[CorpusRecord]) -> tuple[Optional[Tensor], int]:
    """Mean CTC loss of the bottom stack over (input_units, transcription)
    pairs; infeasible samples are skipped with a warning."""
    usable = [r for r in records if ctc_feasible(len(r.input_units), r.target_text)]
    skipped = len(records) - len(usable)
    if skipped:
        log.warning("skipping %d CTC-infeasible samples", skipped)
    if not usable:
        return None, skipped
    pad_unit = model.vocab.unit_global(0)
    unit_ids, lens = _pad_ids([r.input_units for r in usable], pad_unit)
    h = model.bottom_hidden_batched(unit_ids, lens)
    logits = model.ctc_logits(h)
    total = None
    for i, rec in enumerate(usable):
        term = ctc_loss(logits[i, :lens[i]], rec.target_text, model.vocab)
        total = term if total is None else nm.add(total, term)
    return nm.mul(total, 1.0 / len(usable)), skipped


def speech_generation_batch(model: Model, records: Sequence[CorpusRecord],
                            want_ctc: bool = False, noise_std: float = 0.0,
                            distort_std: float = 0.0,
                            noise_rng: Optional[np.random.Generator] = None):
    """Teacher-forced next-unit prediction pieces for speech-output records.

    Unit targets are the record's target_units (plus a trailing unit-eos);
    fusion counts come from the greedy CTC path of the bottom stack over
    those same units, clamped so the window never leaves the target text;
    text representations come from the frozen core over the ground-truth
    response, optionally perturbed with Gaussian noise during training.
    Returns (unit_logits, targets, mask) and, with want_ctc, the mean CTC
    loss over (target_units, target_text) pairs as a fourth value.
    """
    cfg = model.config
    vocab = model.vocab
    b = len(records)
    resps = [list(r.target_text) for r in records]
    tgt_units = [list(r.target_units) for r in records]
    pad_unit = vocab.unit_global(0)
    unit_ids, m_lens = _pad_ids(tgt_units, pad_unit)
    bh = model.bottom_hidden_batched(unit_ids, m_lens)
    cl = model.ctc_logits(bh)

    ctc_total = None
    n_ctc = 0
    if want_ctc:
        for i, r in enumerate(records):
            if not ctc_feasible(len(r.target_units), r.target_text):
                log.warning("skipping CTC-infeasible generated pair %s", r.id)
                continue
            term = ctc_loss(cl[i, :m_lens[i]], r.target_text, vocab)
            ctc_total = term if ctc_total is None else nm.add(ctc_total, term)
            n_ctc += 1
        if ctc_total is not None:
            ctc_total = nm.mul(ctc_total, 1.0 / n_ctc)

    # alignment counts from the greedy path, clamped inside the text
    t_units = unit_ids.shape[1]
    counts = np.zeros((b, t_units + 1), dtype=np.int64)
    text_lens = np.asarray([len(r) for r in resps], dtype=np.int64)
    for i in range(b):
        cc = ctc_greedy_decode(cl.data[i, :m_lens[i]], vocab).prefix_counts
        m = m_lens[i]
        counts[i, 1:m + 1] = cc
        counts[i] = np.minimum(counts[i], text_lens[i] - 1)

    # frozen-core text representations over the teacher-forced context
    text_seqs = [[BOS_ID] + r for r in resps]
    text_ids, tlens = _pad_ids(text_seqs, PAD_ID)
    with no_grad():
        ctx, real, off = _context_pieces(model, records, text_ids, tlens, bottom_grad=False)
        h_core = model.core_hidden_batched(ctx, real)
    l_max = text_ids.shape[1] - 1
    h_rows = h_core.data[:, off + 1: off + 1 + l_max]
    if noise_std > 0.0 or distort_std > 0.0:
        rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        d = h_rows.shape[-1]
        if distort_std > 0.0:
            warp = rng.normal(0.0, distort_std / np.sqrt(d), size=(d, d))
            h_rows = h_rows + h_rows @ warp
        if noise_std > 0.0:
            h_rows = h_rows + rng.normal(0.0, noise_std, size=h_rows.shape)
    h_text = Tensor(h_rows, dtype=cfg.dtype)

    sos = nm.reshape(model.speech_sos, (1, 1, cfg.d_model))
    sos_tile = nm.concat([sos] * b, axis=0) if b > 1 else sos
    x_units = nm.concat([sos_tile, bh], axis=1)
    unit_lens = m_lens + 1
    top_h = model.top_hidden_batched(x_units, h_text, counts, unit_lens, text_lens)
    unit_logits = model.unit_logits(top_h)

    targets = np.zeros((b, t_units + 1), dtype=np.int64)
    mask = np.zeros((b, t_units + 1), dtype=cfg.dtype)
    for i, us in enumerate(tgt_units):
        locals_ = [vocab.unit_local(u) for u in us]
        targets[i, :len(locals_)] = locals_
        targets[i, len(locals_)] = model.unit_eos
        mask[i, :len(locals_) + 1] = 1.0
    if want_ctc:
        return unit_logits, targets, mask, ctc_total
    return unit_logits, targets, mask


def stage2_loss(model: Model, asr_recs: Sequence[CorpusRecord],
                gen_recs: Sequence[CorpusRecord], lam_ctc: float,
                lam_unit: float, noise_std: float = 0.0, distort_std: float = 0.0,
                noise_rng: Optional[np.random.Generator] = None) -> tuple[Tensor, int]:
    terms = []
    skipped = 0
    if asr_recs:
        ctc_in, sk = asr_ctc_loss(model, asr_recs)
        skipped += sk
        if ctc_in is not None and lam_ctc:
            terms.append(nm.mul(ctc_in, lam_ctc))
    if gen_recs:
        unit_logits, targets, mask, ctc_gen = speech_generation_batch(
            model, gen_recs, want_ctc=True, noise_std=noise_std,
            distort_std=distort_std, noise_rng=noise_rng)
        b, t, c = unit_logits.shape
        if lam_unit:
            ce = nm.cross_entropy(nm.reshape(unit_logits, (b * t, c)),
                                  targets.reshape(-1), mask.reshape(-1))
            terms.append(nm.mul(ce, lam_unit))
        if ctc_gen is not None and lam_ctc:
            terms.append(nm.mul(ctc_gen, lam_ctc))
    if not terms:
        raise DataError("stage-2 step received no usable records")
    loss = terms[0]
    for t_ in terms[1:]:
        loss = nm.add(loss, t_)
    return loss, skipped


# -- stage drivers -----------------------------------------------------------------


def _pools(records: Sequence[CorpusRecord], tasks: Sequence[str]) -> dict[str, list]:
    pools = {t: [r for r in records if r.task == t] for t in tasks}
    return {t: rs for t, rs in pools.items() if rs}


def _sample(rng: np.random.Generator, pool: list, n: int) -> list:
    idx = rng.integers(0, len(pool), size=n)
    return [pool[int(i)] for i in idx]


def _finish(report: TrainReport, t0: float) -> TrainReport:
    report.wall_s = time.monotonic() - t0
    return report


def train_stage1(model: Model, train: Sequence[CorpusRecord],
                 dev: Sequence[CorpusRecord],
                 cfg: Optional[StageConfig] = None) -> TrainReport:
    """Vision-text alignment: cross-entropy on text with projection + core
    trainable."""
    cfg = cfg or StageConfig.default_for(1)
    pools = _pools(train, STAGE1_TASKS)
    if "VT2T" not in pools:
        raise DataError("stage 1 needs vision records (task VT2T) in the corpus")
    return _run_text_stage(model, pools, dev, cfg, stage=1)


def train_stage3(model: Model, train: Sequence[CorpusRecord],
                 dev: Sequence[CorpusRecord],
                 cfg: Optional[StageConfig] = None) -> TrainReport:
    """Multimodal multi-task stage: text cross-entropy, core-only updates.
    Speech/vision context flows through the frozen side stacks."""
    cfg = cfg or StageConfig.default_for(3)
    pools = _pools(train, STAGE3_TASKS)
    if not pools:
        raise DataError("stage 3 has an empty task mix")
    return _run_text_stage(model, pools, dev, cfg, stage=3)


def _run_text_stage(model: Model, pools: dict, dev: Sequence[CorpusRecord],
                    cfg: StageConfig, stage: int) -> TrainReport:
    from .evals import eval_asr, eval_exact_match  # avoid import cycle at module load

    t0 = time.monotonic()
    rng = np.random.default_rng([cfg.seed, stage])
    sel = stage_trainable(model, stage)
    apply_stage_masks(model, sel)
    params = model.parameters()
    overrides = {}
    if stage == 3 and cfg.lr_head > 0:
        overrides = {k: cfg.lr_head for k in sel if k.startswith("text_head.")}
    opt = AdamW({k: (params[k], m) for k, m in sel.items()}, lr=cfg.lr,
                weight_decay=cfg.weight_decay, warmup=cfg.warmup, clip=cfg.clip,
                lr_overrides=overrides)
    report = TrainReport(stage=stage)
    tasks = sorted(pools)
    weights = np.asarray([len(pools[t]) for t in tasks], dtype=float)
    weights /= weights.sum()
    for step in range(cfg.steps):
        task = tasks[int(rng.choice(len(tasks), p=weights))]
        batch = _sample(rng, pools[task], cfg.batch_size)
        opt.zero_grad()
        loss = text_task_loss(model, batch, bottom_grad=False)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at stage {stage} step {step}")
        loss.backward()
        opt.step()
        report.losses.append(loss.item())
        if step % cfg.log_every == 0:
            log.info("stage%d step %d task %s loss %.4f", stage, step, task, loss.item())
    final = {}
    try:
        em_tasks = STAGE1_TASKS if stage == 1 else ("S2T", "VS2T")
        em = eval_exact_match(model, dev, tasks=em_tasks, limit=cfg.eval_limit)
        final[f"exact_match[{em.task}]"] = em.value
    except DataError:
        pass
    if stage == 3:
        try:
            final["wer"] = eval_asr(model, dev, limit=cfg.eval_limit).value
        except DataError:
            pass
    report.final = final
    return _finish(report, t0)


def train_stage2(model: Model, train: Sequence[CorpusRecord],
                 dev: Sequence[CorpusRecord],
                 cfg: Optional[StageConfig] = None) -> TrainReport:
    """Speech-text alignment: CTC loss through the bottom stack plus
    next-unit cross-entropy through the top stack, core frozen."""
    from .evals import eval_asr, unit_teacher_accuracy

    cfg = cfg or StageConfig.default_for(2)
    t0 = time.monotonic()
    rng = np.random.default_rng([cfg.seed, 2])
    asr_pool = [r for r in train if r.task in STAGE2_ASR_TASKS]
    gen_pools = _pools(train, STAGE2_GEN_TASKS)  # batches stay task-uniform
    if not asr_pool and not gen_pools:
        raise DataError("stage 2 needs ASR or speech-output records")
    gen_tasks = sorted(gen_pools)
    gen_weights = np.asarray([len(gen_pools[t]) for t in gen_tasks], dtype=float)
    if len(gen_weights):
        gen_weights /= gen_weights.sum()
    sel = stage_trainable(model, 2)
    apply_stage_masks(model, sel)
    params = model.parameters()
    opt = AdamW({k: (params[k], m) for k, m in sel.items()}, lr=cfg.lr,
                weight_decay=cfg.weight_decay, warmup=cfg.warmup, clip=cfg.clip)
    report = TrainReport(stage=2)
    half = max(1, cfg.batch_size // 2)
    for step in range(cfg.steps):
        asr_batch = _sample(rng, asr_pool, half) if asr_pool else []
        gen_batch = []
        if gen_tasks:
            task = gen_tasks[int(rng.choice(len(gen_tasks), p=gen_weights))]
            gen_batch = _sample(rng, gen_pools[task], half)
        opt.zero_grad()
        loss, sk = stage2_loss(model, asr_batch, gen_batch, cfg.lam_ctc, cfg.lam_unit,
                               noise_std=cfg.h_text_noise,
                               distort_std=cfg.h_text_distort, noise_rng=rng)
        report.skipped += sk
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at stage 2 step {step}")
        loss.backward()
        opt.step()
        report.losses.append(loss.item())
        if step % cfg.log_every == 0:
            log.info("stage2 step %d loss %.4f", step, loss.item())
    final = {}
    try:
        final["wer"] = eval_asr(model, dev, limit=cfg.eval_limit).value
    except DataError:
        pass
    final["unit_teacher_accuracy"] = unit_teacher_accuracy(model, dev, limit=cfg.eval_limit)
    report.final = final
    return _finish(report, t0)


def train_stage(model: Model, stage: int, train: Sequence[CorpusRecord],
                dev: Sequence[CorpusRecord],
                cfg: Optional[StageConfig] = None) -> TrainReport:
    fn = {1: train_stage1, 2: train_stage2, 3: train_stage3}.get(stage)
    if fn is None:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    return fn(model, train, dev, cfg)


# -- key=value config files -----------------------------------------------------


def parse_kv_file(path) -> dict[str, str]:
    """Parse the documented training-config format: one `key = value` per
    line, `#` comments, blank lines ignored."""
    out: dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def stage_config_from_file(stage: int, path=None, seed: int = 0) -> StageConfig:
    cfg = StageConfig.default_for(stage, seed=seed)
    if path is None:
        return cfg
    raw = parse_kv_file(path)
    fields = {f: type(getattr(cfg, f)) for f in asdict(cfg)}
    for k, v in raw.items():
        if k not in fields:
            raise DataError(f"unknown training config key {k!r}")
        setattr(cfg, k, fields[k](v))
    return cfg
