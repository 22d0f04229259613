"""End-to-end cascade: VAD segmentation -> features -> tagged ASR beam
search -> MT beam search, plus run scoring.

Models arrive as checkpoints whose metadata embeds the vocabularies, so a
cascade run needs only checkpoint paths, audio, and a forced style tag.
Segments shorter than one second never reach the recognizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import beam as beam_mod
from . import bpe
from . import transformer as tr
from .features import FeatureConfig, Waveform, cmvn, logmel, read_wav
from .scoring import EvalReport
from .vad import Segment, VadConfig, detect_segments, slice_segment

DEFAULT_TAG = "[MC]"


@dataclass
class CascadeResult:
    recording_id: str
    segment: Segment
    transcript: str
    translation: str
    asr_logprob: float
    mt_logprob: float

    def to_dict(self) -> dict:
        return {
            "recording_id": self.recording_id,
            "segment": {"start_s": round(self.segment.start, 6),
                        "end_s": round(self.segment.end, 6),
                        "utterance_id": self.segment.utterance_id},
            "transcript": self.transcript,
            "translation": self.translation,
            "asr_logprob": self.asr_logprob,
            "mt_logprob": self.mt_logprob,
        }


def _vocab_from_metadata(models: list[tr.ModelParameters], key: str) -> bpe.Vocabulary:
    meta = models[0].metadata or {}
    if key not in meta:
        raise ValueError(
            f"checkpoint metadata has no {key!r} vocabulary; re-save the checkpoint "
            "with its vocabulary embedded"
        )
    vocab = bpe.Vocabulary.from_json(meta[key])
    expected = models[0].config.vocab_size if key == "vocab" else models[0].config.src_vocab_size
    if len(vocab) != expected:
        raise ValueError(
            f"vocabulary/model mismatch: {key} has {len(vocab)} tokens but the "
            f"model config expects {expected}"
        )
    return vocab


def _as_models(models) -> list[tr.ModelParameters]:
    if isinstance(models, (str, Path, tr.ModelParameters)):
        models = [models]
    return [tr.load_checkpoint(m) if not isinstance(m, tr.ModelParameters) else m
            for m in models]


def run_cascade(audio, asr_models, mt_models, *, tag: str = DEFAULT_TAG,
                asr_beam: int = 4, mt_beam: int = 4,
                vad_cfg: VadConfig | None = None,
                feat_cfg: FeatureConfig | None = None,
                recording_id: str = "rec") -> list[CascadeResult]:
    """Translate one recording; returns per-segment transcript/translation.

    ``audio`` is a Waveform or a WAV path; ``asr_models``/``mt_models`` are
    checkpoints (paths or loaded parameters), one or more each for
    ensembling. No SpecAugment is applied at inference.
    """
    asr_models = _as_models(asr_models)
    mt_models = _as_models(mt_models)
    if asr_models[0].config.kind != "asr" or mt_models[0].config.kind != "mt":
        raise ValueError(
            f"model kinds are (asr={asr_models[0].config.kind!r}, "
            f"mt={mt_models[0].config.kind!r}); expected ('asr', 'mt')"
        )
    asr_vocab = _vocab_from_metadata(asr_models, "vocab")
    mt_src_vocab = _vocab_from_metadata(mt_models, "src_vocab")
    mt_tgt_vocab = _vocab_from_metadata(mt_models, "vocab")

    if not isinstance(audio, Waveform):
        audio = read_wav(audio)
    feat_cfg = feat_cfg or FeatureConfig(sample_rate=audio.sample_rate)

    asr_cfg = beam_mod.DecodeConfig(beam_size=asr_beam, initial_token=tag)
    mt_cfg = beam_mod.DecodeConfig(beam_size=mt_beam, initial_token="[BOS]")

    results = []
    for seg in detect_segments(audio, vad_cfg, recording_id=recording_id):
        piece = slice_segment(audio, seg)
        feats = cmvn(logmel(piece, feat_cfg, utterance_id=seg.utterance_id))
        asr_hyps = beam_mod.beam_search(
            asr_models, feats.frames.astype(np.float32)[None], asr_cfg, asr_vocab)
        transcript = beam_mod.hypothesis_text(asr_vocab, asr_hyps[0]) if asr_hyps else ""
        asr_lp = asr_hyps[0].logprob if asr_hyps else 0.0

        if transcript:
            src_ids = np.array([bpe.encode(mt_src_vocab, transcript)], dtype=np.int64)
            mt_hyps = beam_mod.beam_search(mt_models, src_ids, mt_cfg, mt_tgt_vocab)
            translation = beam_mod.hypothesis_text(mt_tgt_vocab, mt_hyps[0]) if mt_hyps else ""
            mt_lp = mt_hyps[0].logprob if mt_hyps else 0.0
        else:
            translation, mt_lp = "", 0.0
        results.append(CascadeResult(recording_id, seg, transcript, translation,
                                     float(asr_lp), float(mt_lp)))
    return results


def write_trace(results: list[CascadeResult], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def score_run(hyp_path, ref_path, *, set_name: str | None = None,
              with_wer: bool = False) -> EvalReport:
    """Score line-aligned hypothesis/reference files into an EvalReport."""
    hyps = Path(hyp_path).read_text(encoding="utf-8").splitlines()
    refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(refs):
        raise ValueError(
            f"hypothesis/reference files are not line-aligned: "
            f"{hyp_path} has {len(hyps)} lines, {ref_path} has {len(refs)}"
        )
    report = EvalReport()
    report.add_set(set_name or Path(hyp_path).stem, refs, hyps, with_wer=with_wer)
    return report
