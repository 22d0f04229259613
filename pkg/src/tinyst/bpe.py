"""Byte-pair-encoding subword vocabularies with reserved data-source tags.

One merge-based BPE implementation serves both ASR and MT text. Words are
split into characters plus an end-of-word marker; merges are learned
greedily by pair frequency with lexicographic tie-breaking, so learning is
deterministic. Source tags ([LS], [MC], [CV], ...) live in the specials
block and are never produced by encoding plain text.
"""

from __future__ import annotations

import json
from collections import Counter

EOW = "▁"  # end-of-word marker
PAD, BOS, EOS, UNK = "[PAD]", "[BOS]", "[EOS]", "[UNK]"
CORE_SPECIALS = (PAD, BOS, EOS, UNK)
DEFAULT_TAGS = ("[LS]", "[MC]", "[CV]")

VOCAB_FORMAT_VERSION = 1


class Vocabulary:
    """Immutable BPE vocabulary: specials, character alphabet, ordered merges."""

    def __init__(self, specials: list[str], alphabet: list[str], merges: list[tuple[str, str]]):
        if len(set(specials)) != len(specials):
            raise ValueError("duplicate special tokens")
        if len(set(merges)) != len(merges):
            raise ValueError("duplicate merges in merge table")
        self.specials = list(specials)
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        tokens = self.specials + self.alphabet + ["".join(m) for m in self.merges]
        if len(set(tokens)) != len(tokens):
            raise ValueError("token collision between specials, alphabet and merges")
        self.id_of = {tok: i for i, tok in enumerate(tokens)}
        self.token_of = tokens
        self._word_cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.token_of)

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    @property
    def bos_id(self) -> int:
        return self.id_of[BOS]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS]

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK]

    @property
    def tags(self) -> list[str]:
        return [t for t in self.specials if t not in CORE_SPECIALS]

    def tag_id(self, tag: str) -> int:
        if tag not in self.specials or tag in CORE_SPECIALS:
            raise KeyError(f"unknown source tag {tag!r}; known tags: {self.tags}")
        return self.id_of[tag]

    def to_json(self) -> dict:
        return {
            "specials": self.specials,
            "alphabet": self.alphabet,
            "merges": [list(m) for m in self.merges],
            "version": VOCAB_FORMAT_VERSION,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary version {obj.get('version')}")
        return cls(obj["specials"], obj["alphabet"], [tuple(m) for m in obj["merges"]])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (EOW,)


def _pair_counts(word_freqs: dict[tuple, int]) -> Counter:
    counts: Counter = Counter()
    for sym, freq in word_freqs.items():
        for a, b in zip(sym, sym[1:]):
            counts[(a, b)] += freq
    return counts


def _apply_merge(sym: tuple, pair: tuple[str, str]) -> tuple:
    joined = pair[0] + pair[1]
    out = []
    i = 0
    while i < len(sym):
        if i + 1 < len(sym) and sym[i] == pair[0] and sym[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(sym[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus, target_size: int = 20000,
              tags=DEFAULT_TAGS) -> Vocabulary:
    """Learn merges greedily until the vocabulary reaches target_size or no
    adjacent pair occurs twice. Ties break lexicographically on the pair."""
    specials = list(CORE_SPECIALS) + list(tags)
    word_freqs_raw: Counter = Counter()
    for line in corpus:
        word_freqs_raw.update(line.split())
    if not word_freqs_raw:
        raise ValueError("empty corpus: nothing to learn a vocabulary from")

    alphabet = sorted({ch for w in word_freqs_raw for ch in w} | {EOW})
    base = len(specials) + len(alphabet)
    if target_size <= base:
        raise ValueError(
            f"target_size {target_size} must exceed specials+alphabet = {base}"
        )

    word_freqs = {_word_symbols(w): f for w, f in word_freqs_raw.items()}
    forbidden = set(specials)
    merges: list[tuple[str, str]] = []
    while base + len(merges) < target_size:
        counts = _pair_counts(word_freqs)
        candidates = [p for p, c in counts.items()
                      if c >= 2 and p[0] + p[1] not in forbidden]
        if not candidates:
            break
        pair = min(candidates, key=lambda p: (-counts[p], p))
        merges.append(pair)
        word_freqs = {_apply_merge(sym, pair): f for sym, f in word_freqs.items()}
    return Vocabulary(specials, alphabet, merges)


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Tokenize whitespace-split words with the learned merges.

    Characters outside the training alphabet map to [UNK]. Tag ids are never
    produced here; tags are injected by the trainer or decoder.
    """
    ids: list[int] = []
    for word in text.split():
        cached = vocab._word_cache.get(word)
        if cached is None:
            sym = _word_symbols(word)
            for pair in vocab.merges:
                if len(sym) < 2:
                    break
                sym = _apply_merge(sym, pair)
            cached = [vocab.id_of.get(s, vocab.unk_id) for s in sym]
            vocab._word_cache[word] = cached
        ids.extend(cached)
    return ids


def decode(vocab: Vocabulary, ids) -> str:
    """Inverse of encode on known-character text; specials render literally."""
    pieces = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        pieces.append(vocab.token_of[i])
    return "".join(pieces).replace(EOW, " ").strip()
