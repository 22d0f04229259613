"""Synthetic tone-word corpora.

Each toy word is a fixed harmonic tone (fundamental 200 + 35*index Hz,
3 harmonics, 0.3 s) so an 80-channel filterbank separates adjacent words.
Styles differ in transcript casing and punctuation, mirroring a pooled
training set of case-insensitive/no-punctuation and case-sensitive/
punctuated corpora. MT references come from a deterministic word mapping
(character reversal) plus an optional word-order reversal, so "domain"
differences are controllable. Everything is reproducible from the seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Waveform, write_wav

WORD_DURATION_S = 0.3
WORD_GAP_S = 0.05
UTTERANCE_PAD_S = 0.05
BASE_F0_HZ = 200.0
F0_STEP_HZ = 35.0
N_HARMONICS = 3
RECORDING_GAP_S = 2.5   # inter-utterance silence in long-form recordings
RECORDING_PAD_S = 1.0

CONSONANTS = "bdgklmnprst"
VOWELS = "aeiou"


@dataclass
class StyleSpec:
    tag: str
    casing: str = "lower"        # upper | lower
    punctuation: str = "none"    # none | period
    word_subset: tuple[int, int] | None = None  # train-split word index range [lo, hi)

    def __post_init__(self):
        if self.casing not in ("upper", "lower"):
            raise ValueError(f"casing must be upper|lower, got {self.casing!r}")
        if self.punctuation not in ("none", "period"):
            raise ValueError(f"punctuation must be none|period, got {self.punctuation!r}")


@dataclass
class MtRule:
    reverse_order: bool = False  # reverse content-word order on the target side


@dataclass
class SynthConfig:
    vocab_size: int = 20
    styles: list[StyleSpec] = field(default_factory=lambda: [
        StyleSpec("[LS]", casing="upper", punctuation="none"),
        StyleSpec("[MC]", casing="lower", punctuation="period"),
    ])
    utterances_per_style: int = 100     # train split size
    dev_per_style: int = 10
    test_per_style: int = 30
    words_per_utterance: tuple[int, int] = (4, 7)  # inclusive range
    sample_rate: int = 16000
    noise_level: float = 0.005
    mt_rule: MtRule = field(default_factory=MtRule)
    mt_pretrain_lines: int = 450        # 2:1 out-of-domain : in-domain mix
    mt_finetune_lines: int = 150
    mt_dev_lines: int = 50
    mt_test_lines: int = 60
    recordings: int = 3
    utterances_per_recording: int = 4
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.words_per_utterance, int):
            self.words_per_utterance = (self.words_per_utterance, self.words_per_utterance)
        if len(self.styles) < 1 or self.vocab_size < 1:
            raise ValueError("need at least one style and one word")
        if self.words_per_utterance[0] < 1:
            raise ValueError("words per utterance must be >= 1")
        tags = [s.tag for s in self.styles]
        if len(set(tags)) != len(tags):
            raise ValueError(f"duplicate style tags: {tags}")


def toy_lexicon(n: int) -> list[str]:
    """Deterministic CV-syllable words, distinct for n <= 250."""
    words = []
    for i in range(n):
        words.append(CONSONANTS[i % 10] + VOWELS[(i // 10) % 5]
                     + CONSONANTS[(i // 50) % 10] + VOWELS[(i // 500) % 5])
    return words


def word_fundamental(index: int) -> float:
    return BASE_F0_HZ + F0_STEP_HZ * index


def render_word(index: int, sample_rate: int) -> np.ndarray:
    t = np.arange(int(round(WORD_DURATION_S * sample_rate))) / sample_rate
    f0 = word_fundamental(index)
    return sum(0.3 / (k + 1) * np.sin(2 * np.pi * f0 * (k + 1) * t)
               for k in range(N_HARMONICS))


def render_utterance(word_indices, cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    sr = cfg.sample_rate
    pad = np.zeros(int(round(UTTERANCE_PAD_S * sr)))
    gap = np.zeros(int(round(WORD_GAP_S * sr)))
    parts = [pad]
    for j, w in enumerate(word_indices):
        if j:
            parts.append(gap)
        parts.append(render_word(int(w), sr))
    parts.append(pad)
    audio = np.concatenate(parts)
    if cfg.noise_level > 0:
        audio = audio + cfg.noise_level * rng.standard_normal(len(audio))
    return Waveform(audio, sr)


def render_transcript(word_indices, lexicon, style: StyleSpec) -> str:
    text = " ".join(lexicon[int(w)] for w in word_indices)
    text = text.upper() if style.casing == "upper" else text.lower()
    if style.punctuation == "period":
        text += " ."
    return text


def translate_words(word_indices, lexicon, rule: MtRule) -> str:
    """Deterministic toy translation: per-word character reversal, optional
    order reversal, terminal period preserved."""
    tgt = [lexicon[int(w)][::-1] for w in word_indices]
    if rule.reverse_order:
        tgt = tgt[::-1]
    return " ".join(tgt)


def mt_source_text(word_indices, lexicon, style: StyleSpec) -> str:
    return render_transcript(word_indices, lexicon, style)


def mt_target_text(word_indices, lexicon, style: StyleSpec, rule: MtRule) -> str:
    text = translate_words(word_indices, lexicon, rule)
    if style.punctuation == "period":
        text += " ."
    return text


def _sample_words(rng: np.random.Generator, cfg: SynthConfig,
                  subset: tuple[int, int] | None) -> np.ndarray:
    lo, hi = (0, cfg.vocab_size) if subset is None else subset
    n = int(rng.integers(cfg.words_per_utterance[0], cfg.words_per_utterance[1],
                         endpoint=True))
    return rng.integers(lo, hi, size=n)


def _style_dir_name(tag: str) -> str:
    return "".join(ch for ch in tag if ch.isalnum()).lower()


def generate_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write wav files, ASR manifests, MT bitext, and long-form recordings.

    Returns a manifest-of-manifests dict with all output paths. Byte-identical
    for identical configs (including the seed).
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    lexicon = toy_lexicon(cfg.vocab_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    index: dict = {"lexicon": lexicon, "out_dir": str(out)}

    # ASR utterances: word_subset applies to the train split only; dev/test
    # draw from the full lexicon so coverage gaps show up in evaluation.
    splits = {"train": (cfg.utterances_per_style, True),
              "dev": (cfg.dev_per_style, False),
              "test": (cfg.test_per_style, False)}
    for split, (count, use_subset) in splits.items():
        records = []
        for style in cfg.styles:
            stem = _style_dir_name(style.tag)
            for i in range(count):
                words = _sample_words(rng, cfg, style.word_subset if use_subset else None)
                utt_id = f"{stem}_{split}_{i:04d}"
                wav_rel = f"wav/{utt_id}.wav"
                write_wav(out / wav_rel, render_utterance(words, cfg, rng))
                records.append({
                    "utterance_id": utt_id,
                    "audio_path": wav_rel,
                    "transcript": render_transcript(words, lexicon, style),
                    "source_tag": style.tag,
                    "word_indices": [int(w) for w in words],
                })
        path = out / f"asr_{split}.jsonl"
        _write_jsonl(path, records)
        index[f"asr_{split}"] = str(path)

    # MT bitext. Sources are rendered in the primary (first punctuated, else
    # first) style: that is the style the cascade forces at inference.
    primary = next((s for s in cfg.styles if s.punctuation == "period"), cfg.styles[0])
    out_rule = MtRule(reverse_order=not cfg.mt_rule.reverse_order)
    index["mt_primary_tag"] = primary.tag

    def mt_records(count: int, rule_picker) -> list[dict]:
        recs = []
        for i in range(count):
            words = _sample_words(rng, cfg, None)
            rule = rule_picker(i)
            recs.append({
                "utterance_id": f"mt_{len(recs):06d}",
                "src_text": mt_source_text(words, lexicon, primary),
                "tgt_text": mt_target_text(words, lexicon, primary, rule),
            })
        return recs

    mt_sets = {
        # pretraining pool: two thirds follow the out-of-domain rule
        "mt_pretrain": mt_records(cfg.mt_pretrain_lines,
                                  lambda i: cfg.mt_rule if i % 3 == 0 else out_rule),
        "mt_finetune": mt_records(cfg.mt_finetune_lines, lambda i: cfg.mt_rule),
        "mt_dev": mt_records(cfg.mt_dev_lines, lambda i: cfg.mt_rule),
        "mt_test": mt_records(cfg.mt_test_lines, lambda i: cfg.mt_rule),
    }
    for name, recs in mt_sets.items():
        path = out / f"{name}.jsonl"
        _write_jsonl(path, recs)
        index[name] = str(path)
        (out / f"{name}.src").write_text(
            "\n".join(r["src_text"] for r in recs) + "\n", encoding="utf-8")
        (out / f"{name}.tgt").write_text(
            "\n".join(r["tgt_text"] for r in recs) + "\n", encoding="utf-8")

    # monolingual target text (back-translation input)
    mono = [mt_target_text(_sample_words(rng, cfg, None), lexicon, primary, cfg.mt_rule)
            for _ in range(cfg.mt_dev_lines)]
    (out / "mono.tgt").write_text("\n".join(mono) + "\n", encoding="utf-8")
    index["mono"] = str(out / "mono.tgt")

    # long-form recordings for the cascade: utterances separated by long
    # silences so the energy VAD's median threshold sees mostly silence
    rec_records = []
    ref_src: list[str] = []
    ref_tgt: list[str] = []
    sr = cfg.sample_rate
    for r in range(cfg.recordings):
        rec_id = f"rec{r:03d}"
        parts = [np.zeros(int(RECORDING_PAD_S * sr))]
        texts = []
        for u in range(cfg.utterances_per_recording):
            if u:
                parts.append(np.zeros(int(RECORDING_GAP_S * sr)))
            words = _sample_words(rng, cfg, None)
            parts.append(render_utterance(words, cfg, rng).samples)
            texts.append({
                "transcript": render_transcript(words, lexicon, primary),
                "translation": mt_target_text(words, lexicon, primary, cfg.mt_rule),
            })
            ref_src.append(texts[-1]["transcript"])
            ref_tgt.append(texts[-1]["translation"])
        parts.append(np.zeros(int(RECORDING_PAD_S * sr)))
        wav_rel = f"recordings/{rec_id}.wav"
        write_wav(out / wav_rel, Waveform(np.concatenate(parts), sr))
        rec_records.append({"recording_id": rec_id, "audio_path": wav_rel,
                            "utterances": texts})
    _write_jsonl(out / "recordings.jsonl", rec_records)
    (out / "recordings_ref.src").write_text("\n".join(ref_src) + "\n", encoding="utf-8")
    (out / "recordings_ref.tgt").write_text("\n".join(ref_tgt) + "\n", encoding="utf-8")
    index["recordings"] = str(out / "recordings.jsonl")
    index["recordings_ref_src"] = str(out / "recordings_ref.src")
    index["recordings_ref_tgt"] = str(out / "recordings_ref.tgt")

    with open(out / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return index


def _write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# flat key=value config files for the CLI


def parse_synth_config(path) -> SynthConfig:
    """Parse a flat key=value synth config; styles use the compact form
    ``styles=[LS]:upper:none,[MC]:lower:period[:lo-hi]``."""
    kwargs: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "styles":
            styles = []
            for part in value.split(","):
                bits = part.strip().split(":")
                if len(bits) not in (3, 4):
                    raise ValueError(f"{path}:{lineno}: bad style spec {part!r}")
                subset = None
                if len(bits) == 4:
                    lo, hi = bits[3].split("-")
                    subset = (int(lo), int(hi))
                styles.append(StyleSpec(bits[0], bits[1], bits[2], subset))
            kwargs["styles"] = styles
        elif key == "mt_reverse_order":
            kwargs["mt_rule"] = MtRule(reverse_order=value.lower() in ("1", "true", "yes"))
        elif key == "words_per_utterance":
            lo, _, hi = value.partition("-")
            kwargs[key] = (int(lo), int(hi or lo))
        elif key == "noise_level":
            kwargs[key] = float(value)
        elif key in {f.name for f in dataclasses.fields(SynthConfig)}:
            kwargs[key] = int(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown SynthConfig field {key!r}")
    return SynthConfig(**kwargs)
