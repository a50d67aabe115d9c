"""Desk-scale streaming language-vision-speech decoder.

A decoder-only transformer whose bottom speech layers learn speech-to-text
mapping through a CTC head, whose top speech layers generate speech units
guided by alignment-based fusion with the text stream, and whose inference
loop emits ASR partials, text tokens, and speech units simultaneously with
a wait-k lag.
"""

from .ctc import (CtcAlignment, collapse, ctc_greedy_decode, ctc_loss,
                  ctc_loss_bruteforce, extend_alignment, remove_blanks)
from .data import (CorpusRecord, SyntheticWorld, gen_corpus, load_checkpoint,
                   load_model, load_split, save_checkpoint, validate_corpus)
from .evals import EvalResult, edit_distance, eval_asr, eval_exact_match, \
    eval_unit_consistency, word_error_rate
from .model import Model, ModelConfig, SessionCache, fusion_window
from .numerics import Tensor, no_grad, set_default_dtype
from .streaming import (StreamEvent, SyntheticSpeechCodec, iter_threaded,
                        modality_route, run_session, speech_synthesize,
                        speech_tokenize)
from .training import StageConfig, TrainReport, train_stage, train_stage1, \
    train_stage2, train_stage3
from .vocab import MultimodalVocab, TokenKind, build_vocab

__version__ = "0.1.0"

__all__ = [
    "CtcAlignment", "collapse", "ctc_greedy_decode", "ctc_loss",
    "ctc_loss_bruteforce", "extend_alignment", "remove_blanks",
    "CorpusRecord", "SyntheticWorld", "gen_corpus", "load_checkpoint",
    "load_model", "load_split", "save_checkpoint", "validate_corpus",
    "EvalResult", "edit_distance", "eval_asr", "eval_exact_match",
    "eval_unit_consistency", "word_error_rate",
    "Model", "ModelConfig", "SessionCache", "fusion_window",
    "Tensor", "no_grad", "set_default_dtype",
    "StreamEvent", "SyntheticSpeechCodec", "iter_threaded", "modality_route",
    "run_session", "speech_synthesize", "speech_tokenize",
    "StageConfig", "TrainReport", "train_stage", "train_stage1",
    "train_stage2", "train_stage3",
    "MultimodalVocab", "TokenKind", "build_vocab",
]
