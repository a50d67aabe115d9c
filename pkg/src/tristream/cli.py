"""Command-line entry point: corpus generation, training, streaming
inference, evaluation, gradient checking, corpus validation.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
All randomness flows from --seed.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import data as datamod
from . import numerics as nm
from .ctc import ctc_loss
from .errors import DataError, NumericError, TriStreamError
from .evals import EvalResult, eval_asr, eval_exact_match, eval_unit_consistency
from .model import Model, ModelConfig
from .numerics import Tensor
from .streaming import EOS, format_trace_line, run_session
from .training import (StageConfig, stage2_loss, stage_config_from_file,
                       stage_trainable, train_stage)
from .vocab import build_vocab

EXIT_DATA = 3
EXIT_NUMERIC = 4


def _setup_logging() -> None:
    level = os.environ.get("TRISTREAM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _guard(fn):
    """Map package exceptions onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except TriStreamError as exc:
            raise click.UsageError(str(exc))

    return wrapper


def _parse_task_mix(spec: str | None) -> dict | None:
    if spec is None:
        return None
    mix: dict[str, float] = {}
    try:
        for part in spec.split(","):
            if not part.strip():
                continue
            if "=" in part:
                k, v = part.split("=", 1)
                mix[k.strip()] = float(v)
            else:
                raise ValueError(part)
    except ValueError:
        raise click.UsageError(f"task mix must look like ASR=0.2,S2T=0.3, got {spec!r}")
    if not mix or sum(mix.values()) <= 0:
        raise click.UsageError(f"task mix {spec!r} has no positive weight")
    return mix


def _parse_window(w: str):
    if w in ("inf", "Inf", "INF"):
        return math.inf
    try:
        val = int(w)
    except ValueError:
        raise click.UsageError(f"--w expects a positive integer or 'inf', got {w!r}")
    if val < 1:
        raise click.UsageError("--w must be >= 1")
    return val


@click.group()
def main() -> None:
    """Streaming language-vision-speech toy stack."""
    _setup_logging()


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(), help="output corpus directory")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-train", default=5000, show_default=True, type=int)
@click.option("--n-dev", default=400, show_default=True, type=int)
@click.option("--n-test", default=400, show_default=True, type=int)
@click.option("--task-mix", default=None, help="e.g. ASR=0.3,S2T=0.2,S2S=0.2")
@click.option("--text-size", default=64, show_default=True, type=int)
@click.option("--unit-size", default=32, show_default=True, type=int)
@_guard
def cmd_gen_data(out, seed, n_train, n_dev, n_test, task_mix, text_size, unit_size):
    """Generate a synthetic tri-modal corpus (train/dev/test JSONL + meta)."""
    vocab = build_vocab(text_size, unit_size)
    meta = datamod.gen_corpus(out, vocab, seed, n_train, n_dev, n_test,
                              task_mix=_parse_task_mix(task_mix))
    datamod.validate_corpus(out)
    click.echo(json.dumps({"corpus": str(out), "counts": meta["counts"]}))


@main.command("validate-data")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@_guard
def cmd_validate_data(data_dir):
    """Check every record of a corpus against its invariants."""
    counts = datamod.validate_corpus(data_dir)
    click.echo(json.dumps({"valid": True, "counts": counts}))


@main.command("train")
@click.option("--stage", required=True, type=click.IntRange(1, 3))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="output checkpoint path")
@click.option("--init", "init_path", default=None, type=click.Path(),
              help="prior-stage checkpoint (required for stages 2 and 3)")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True),
              help="key=value training config file")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--report", "report_path", default=None, type=click.Path(),
              help="where to write the per-step JSONL report")
@_guard
def cmd_train(stage, data_dir, out, init_path, config_path, seed, report_path):
    """Run one training stage and write a checkpoint plus report."""
    meta = datamod.load_meta(data_dir)
    if stage == 1:
        if init_path is not None:
            raise click.UsageError("stage 1 starts from scratch; drop --init")
        config = ModelConfig(text_size=meta["text_size"], unit_size=meta["unit_size"],
                             vision_tokens_per_image=meta["vision_tokens"],
                             vision_feature_dim=meta["vision_dim"])
        model = Model(config, np.random.default_rng(seed))
    else:
        if init_path is None:
            raise click.UsageError(f"stage {stage} requires the stage-{stage - 1} "
                                   f"checkpoint via --init")
        model, ck_meta = datamod.load_model(init_path)
        prev = ck_meta.get("stage")
        if prev != stage - 1:
            raise click.UsageError(f"--init checkpoint is from stage {prev}, "
                                   f"stage {stage} needs stage {stage - 1}")
    train_recs = datamod.load_split(data_dir, "train")
    dev_recs = datamod.load_split(data_dir, "dev")
    cfg = stage_config_from_file(stage, config_path, seed=seed)
    report = train_stage(model, stage, train_recs, dev_recs, cfg)
    datamod.save_checkpoint(out, model, meta={"stage": stage, "corpus_seed": meta["seed"]})
    if report_path:
        report.write_jsonl(report_path)
    click.echo(json.dumps({"stage": stage, "checkpoint": str(out),
                           "final": report.final, "wall_s": round(report.wall_s, 2),
                           "skipped": report.skipped}))


def _load_record_input(path: str, meta_shape=(16, 32)) -> datamod.CorpusRecord:
    line = Path(path).read_text().strip().splitlines()
    if not line:
        raise DataError(f"{path}: empty input file")
    return datamod.CorpusRecord.from_json(line[0], meta_shape)


@main.command("infer")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="JSON record file (corpus-record schema; first line is used)")
@click.option("--modality-in", type=click.Choice(["text", "speech", "vision+text", "vision+speech"]),
              default="speech", show_default=True)
@click.option("--modality-out", type=click.Choice(["text", "speech"]),
              default="text", show_default=True)
@click.option("--trace", "trace_path", default=None, type=click.Path(),
              help="also write the event trace to this file")
@click.option("--k", default=None, type=int, help="wait-k lag (default: checkpoint value)")
@click.option("--w", default=None, help="fusion window, integer or 'inf'")
@click.option("--fusion", default=None, type=click.Choice(["attention", "add_input", "add_per_layer"]),
              help="must match how the checkpoint was trained (attention vs add)")
@_guard
def cmd_infer(model_path, input_path, modality_in, modality_out, trace_path, k, w, fusion):
    """Stream one session's events to stdout (line-delimited records)."""
    model, _ = datamod.load_model(model_path)
    if fusion is not None and fusion != model.config.fusion_type:
        both_add = {fusion, model.config.fusion_type} <= {"add_input", "add_per_layer"}
        if not both_add:
            raise click.UsageError(
                f"checkpoint was trained with fusion={model.config.fusion_type}; "
                f"cannot switch to {fusion}")
        model.config.fusion_type = fusion
    cfg = model.config
    shape = (cfg.vision_tokens_per_image, cfg.vision_feature_dim)
    rec = _load_record_input(input_path, shape)
    vision = rec.vision_features if "vision" in modality_in else None
    units = rec.input_units if "speech" in modality_in else None
    text = rec.input_text if modality_in.endswith("text") else None
    if ("speech" in modality_in and units is None) or \
       (modality_in.endswith("text") and text is None):
        raise DataError(f"input record lacks the fields for --modality-in {modality_in}")
    window = _parse_window(w) if w is not None else None
    trace_fh = open(trace_path, "w") if trace_path else None
    summary = None
    try:
        for ev in run_session(model, vision=vision, input_units=units, input_text=text,
                              speech_out=(modality_out == "speech"),
                              wait_k=k, window=window):
            line = format_trace_line(ev)
            click.echo(line)
            sys.stdout.flush()
            if trace_fh:
                trace_fh.write(line + "\n")
            if ev.kind == EOS:
                summary = ev.payload
    finally:
        if trace_fh:
            trace_fh.close()
    click.echo(json.dumps({"summary": summary}, separators=(",", ":")))


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--task", default="all", show_default=True,
              type=click.Choice(["asr", "recall", "consistency", "all"]))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "dev", "test"]))
@click.option("--limit", default=None, type=int)
@_guard
def cmd_eval(model_path, data_dir, task, split, limit):
    """Evaluate WER / exact match / unit consistency on a corpus split."""
    model, _ = datamod.load_model(model_path)
    records = datamod.load_split(data_dir, split)
    if not records:
        raise DataError(f"{split} split is empty")
    results: list[EvalResult] = []
    if task in ("asr", "all"):
        results.append(eval_asr(model, records, limit=limit))
    if task in ("recall", "all"):
        results.append(eval_exact_match(model, records, limit=limit))
    if task in ("consistency", "all"):
        results.append(eval_unit_consistency(model, records, limit=limit))
    for res in results:
        click.echo(res.to_json())


def _gradcheck_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, ffn_mult=2, n_core_layers=1,
                       n_bottom_layers=1, n_top_layers=1, text_size=10, unit_size=6,
                       vision_feature_dim=6, vision_tokens_per_image=3,
                       max_text_tokens=8)


def gradcheck_report(seed: int = 0, sample: int = 4,
                     tol: float = 1e-3) -> tuple[bool, dict[str, float]]:
    """Finite-difference check of the CTC loss and a full-model loss on a
    tiny config; returns (ok, per-parameter-group max relative error)."""
    from .data import SyntheticWorld, _make_record

    cfg = _gradcheck_config()
    rng = np.random.default_rng(seed)
    model = Model(cfg, rng)
    vocab = model.vocab

    logits = Tensor(rng.normal(size=(5, vocab.total_size)), requires_grad=True)
    target = [4, 5]
    ctc_errs = nm.gradcheck(lambda: ctc_loss(logits, target, vocab),
                            {"ctc.logits": logits}, h=1e-5, rng=rng)

    world = SyntheticWorld(vocab, seed, n_keys=3, n_labels=2,
                           vision_tokens=cfg.vision_tokens_per_image,
                           vision_dim=cfg.vision_feature_dim)
    recs = [_make_record(world, rng, "VS2S", f"g{i}") for i in range(2)]
    params = model.parameters()
    for t in params.values():
        t.requires_grad = True

    def full_loss():
        from .training import text_task_loss
        l1, _ = stage2_loss(model, [], recs, 1.0, 1.0)
        l2 = text_task_loss(model, recs, bottom_grad=True)
        return nm.add(l1, l2)

    model_errs = nm.gradcheck(full_loss, params, h=1e-4, sample=sample, rng=rng)
    errs = {**ctc_errs, **model_errs}
    ok = all(e < tol for e in errs.values())
    return ok, errs


@main.command("gradcheck")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--sample", default=4, show_default=True, type=int,
              help="elements probed per parameter tensor")
@_guard
def cmd_gradcheck(seed, sample):
    """Finite-difference gradient checks (CTC + full model); exit 4 on failure."""
    ok, errs = gradcheck_report(seed=seed, sample=sample)
    for name in sorted(errs):
        click.echo(f"{'PASS' if errs[name] < 1e-3 else 'FAIL'} {name} max_rel_err={errs[name]:.3e}")
    click.echo("GRADCHECK " + ("PASS" if ok else "FAIL"))
    if not ok:
        raise NumericError("gradient check failed")


if __name__ == "__main__":
    main()
