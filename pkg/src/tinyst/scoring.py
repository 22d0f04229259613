"""Translation and recognition quality metrics: WER, BLEU, TER, CharacTER.

BLEU is corpus-level 4-gram BLEU with mteval-13a-style tokenization and no
smoothing. TER uses greedy phrase shifts (shifted phrase must match the
reference exactly, best-gain selection, leftmost-shortest tie-break).
CharacTER shifts word units but counts edits in characters, normalized by
the hypothesis character length. Case-insensitive variants casefold both
sides before tokenization.
"""

from __future__ import annotations

import json
import math
import re
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

NGRAM_ORDER = 4


# ---------------------------------------------------------------------------
# tokenization


@lru_cache(maxsize=1)
def _unicode_punct() -> str:
    return "".join(chr(x) for x in range(sys.maxunicode)
                   if unicodedata.category(chr(x)).startswith("P"))


@lru_cache(maxsize=1)
def _punct_res() -> tuple[re.Pattern, re.Pattern]:
    punct = re.escape(_unicode_punct())
    return (re.compile(r"([^\d])([" + punct + r"])"),
            re.compile(r"([" + punct + r"])([^\d])"))


def tokenize_13a(line: str) -> list[str]:
    """Minimal mteval-13a-style tokenization: split unicode punctuation from
    words except digit-internal periods/commas; collapse whitespace."""
    norm = " " + line.replace("\n", " ") + " "
    pre, post = _punct_res()
    norm = pre.sub(r"\1 \2 ", norm)
    norm = post.sub(r" \1 \2", norm)
    return norm.split()


def _as_words(seq) -> list[str]:
    if isinstance(seq, str):
        return seq.split()
    return list(seq)


# ---------------------------------------------------------------------------
# edit distances


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Word error rate: word-level edit distance over reference length."""
    ref, hyp = _as_words(ref), _as_words(hyp)
    if not ref:
        raise ValueError("WER undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens: list[str]) -> Counter:
    counts: Counter = Counter()
    for n in range(1, NGRAM_ORDER + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


def bleu(refs, hyps, case_sensitive: bool = True) -> float:
    """Corpus-level 4-gram BLEU in [0, 100], 13a tokenization, no smoothing.

    Orders with no hypothesis n-grams at all are vacuous and skipped
    (effective order), so identical short corpora still score 100; an order
    with n-grams but zero matches makes the whole score 0.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"line count mismatch: {len(refs)} references vs {len(hyps)} hypotheses")
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for ref, hyp in zip(refs, hyps):
        if not case_sensitive:
            ref, hyp = ref.casefold(), hyp.casefold()
        r = tokenize_13a(ref)
        h = tokenize_13a(hyp)
        hyp_len += len(h)
        ref_len += len(r)
        rc = _ngram_counts(r)
        for ng, c in _ngram_counts(h).items():
            n = len(ng)
            total[n - 1] += c
            correct[n - 1] += min(c, rc.get(ng, 0))
    if hyp_len == 0:
        return 0.0
    orders = [n for n in range(NGRAM_ORDER) if total[n] > 0]
    if not orders:
        return 0.0
    if any(correct[n] == 0 for n in orders):
        return 0.0
    log_prec = sum(math.log(correct[n] / total[n]) for n in orders) / len(orders)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# TER


def _shift_candidates(hyp: list[str], ref: list[str]):
    """All (i, length, j) where hyp[i:i+length] equals ref[j:j+length]."""
    n, m = len(hyp), len(ref)
    for i in range(n):
        for length in range(1, n - i + 1):
            phrase = hyp[i:i + length]
            for j in range(m - length + 1):
                if ref[j:j + length] == phrase:
                    yield i, length, j
                    break  # one matching ref position is enough to allow the shift


def _apply_shift(hyp: list[str], i: int, length: int, dest: int) -> list[str]:
    phrase = hyp[i:i + length]
    rest = hyp[:i] + hyp[i + length:]
    return rest[:dest] + phrase + rest[dest:]


def _all_shifts(hyp: list[str], ref: list[str]):
    """Yield every distinct post-shift hypothesis (phrase must match ref)."""
    n = len(hyp)
    seen = set()
    for i, length, _ in _shift_candidates(hyp, ref):
        rest_len = n - length
        for dest in range(rest_len + 1):
            if dest == i:  # no-op move
                continue
            shifted = _apply_shift(hyp, i, length, dest)
            key = tuple(shifted)
            if key not in seen:
                seen.add(key)
                yield shifted, (i, length, dest)


def ter_alignment(ref, hyp) -> tuple[int, int]:
    """Greedy TER numerator: (num_shifts, final_edit_distance)."""
    ref, hyp = _as_words(ref), _as_words(hyp)
    current = list(hyp)
    shifts = 0
    cur_edit = edit_distance(ref, current)
    while cur_edit > 0:
        best = None
        for shifted, (i, length, dest) in _all_shifts(current, ref):
            e = edit_distance(ref, shifted)
            key = (e, i, length, dest)
            if best is None or key < best[0]:
                best = (key, shifted)
        if best is None or best[0][0] >= cur_edit:
            break
        shifts += 1
        cur_edit = best[0][0]
        current = best[1]
    return shifts, cur_edit


def ter(ref, hyp, case_sensitive: bool = True) -> float:
    """Translation edit rate: (shifts + edits) / reference length."""
    ref, hyp = _as_words(ref), _as_words(hyp)
    if not ref:
        raise ValueError("TER undefined for an empty reference")
    if not case_sensitive:
        ref = [w.casefold() for w in ref]
        hyp = [w.casefold() for w in hyp]
    shifts, edits = ter_alignment(ref, hyp)
    return (shifts + edits) / len(ref)


# ---------------------------------------------------------------------------
# CharacTER


def character_alignment(ref, hyp) -> tuple[int, int]:
    """Greedy CharacTER numerator: word-level shifts, character-level edits."""
    ref_w, hyp_w = _as_words(ref), _as_words(hyp)
    ref_s = " ".join(ref_w)
    current = list(hyp_w)
    shifts = 0
    cur_edit = edit_distance(ref_s, " ".join(current))
    while cur_edit > 0:
        best = None
        for shifted, (i, length, dest) in _all_shifts(current, ref_w):
            e = edit_distance(ref_s, " ".join(shifted))
            key = (e, i, length, dest)
            if best is None or key < best[0]:
                best = (key, shifted)
        if best is None or best[0][0] >= cur_edit:
            break
        shifts += 1
        cur_edit = best[0][0]
        current = best[1]
    return shifts, cur_edit


def character_metric(ref, hyp) -> float:
    """Shift-aware character edit rate normalized by hypothesis length."""
    ref_w, hyp_w = _as_words(ref), _as_words(hyp)
    hyp_chars = len(" ".join(hyp_w))
    if hyp_chars == 0:
        raise ValueError("CharacTER undefined for an empty hypothesis")
    shifts, edits = character_alignment(ref_w, hyp_w)
    return (shifts + edits) / hyp_chars


# ---------------------------------------------------------------------------
# corpus-level aggregation and the evaluation report


def corpus_wer(refs, hyps) -> float:
    """Total word edits over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError(f"line count mismatch: {len(refs)} references vs {len(hyps)} hypotheses")
    edits = 0
    ref_words = 0
    for ref, hyp in zip(refs, hyps):
        r, h = _as_words(ref), _as_words(hyp)
        edits += edit_distance(r, h)
        ref_words += len(r)
    if ref_words == 0:
        raise ValueError("WER undefined: references contain no words")
    return edits / ref_words


def corpus_ter(refs, hyps, case_sensitive: bool = True) -> float:
    """Total (shifts + edits) over total reference words, 13a tokenization."""
    if len(refs) != len(hyps):
        raise ValueError(f"line count mismatch: {len(refs)} references vs {len(hyps)} hypotheses")
    numer = 0
    ref_words = 0
    for ref, hyp in zip(refs, hyps):
        if not case_sensitive:
            ref, hyp = ref.casefold(), hyp.casefold()
        r, h = tokenize_13a(ref), tokenize_13a(hyp)
        if not r:
            raise ValueError("TER undefined for an empty reference line")
        shifts, edits = ter_alignment(r, h)
        numer += shifts + edits
        ref_words += len(r)
    return numer / ref_words


def corpus_character(refs, hyps) -> float:
    """Mean per-sentence CharacTER over the corpus."""
    if len(refs) != len(hyps):
        raise ValueError(f"line count mismatch: {len(refs)} references vs {len(hyps)} hypotheses")
    scores = []
    for ref, hyp in zip(refs, hyps):
        r, h = tokenize_13a(ref), tokenize_13a(hyp)
        if not h:
            scores.append(1.0 if r else 0.0)  # empty hypothesis line: total miss
            continue
        scores.append(character_metric(r, h))
    return sum(scores) / len(scores) if scores else 0.0


@dataclass
class EvalRow:
    name: str
    bleu: float
    ter: float
    character: float
    bleu_ci: float
    ter_ci: float
    wer: float | None = None

    def to_dict(self) -> dict:
        d = {
            "set": self.name,
            "BLEU": round(self.bleu, 2),
            "TER": round(self.ter * 100, 2),
            "BEER": "n/a",
            "CharacTER": round(self.character * 100, 2),
            "BLEU(ci)": round(self.bleu_ci, 2),
            "TER(ci)": round(self.ter_ci * 100, 2),
        }
        if self.wer is not None:
            d["WER"] = round(self.wer * 100, 2)
        return d


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add_set(self, name: str, refs: list[str], hyps: list[str],
                with_wer: bool = False) -> EvalRow:
        row = EvalRow(
            name=name,
            bleu=bleu(refs, hyps, case_sensitive=True),
            ter=corpus_ter(refs, hyps, case_sensitive=True),
            character=corpus_character(refs, hyps),
            bleu_ci=bleu(refs, hyps, case_sensitive=False),
            ter_ci=corpus_ter(refs, hyps, case_sensitive=False),
            wer=corpus_wer(refs, hyps) if with_wer else None,
        )
        self.rows.append(row)
        return row

    def to_json(self) -> str:
        return json.dumps({"sets": [r.to_dict() for r in self.rows],
                           "signature": self.signature()}, indent=2)

    @staticmethod
    def signature() -> str:
        return "bleu: 4-gram, tok 13a, no smoothing | ter: greedy shifts | character: hyp-normalized"

    def render_table(self) -> str:
        cols = ["SET", "BLEU", "TER", "BEER", "CharacTER", "BLEU(ci)", "TER(ci)", "WER"]
        have_wer = any(r.wer is not None for r in self.rows)
        if not have_wer:
            cols = cols[:-1]
        lines = ["  ".join(f"{c:>10}" for c in cols)]
        for r in self.rows:
            d = r.to_dict()
            vals = [d["set"], d["BLEU"], d["TER"], d["BEER"], d["CharacTER"],
                    d["BLEU(ci)"], d["TER(ci)"]]
            if have_wer:
                vals.append(d.get("WER", "-"))
            lines.append("  ".join(f"{v:>10}" for v in vals))
        lines.append(f"# {self.signature()}")
        return "\n".join(lines)
