"""Beam search with forced initial source tags and multi-model ensembling.

Ensembles combine per-model next-token distributions as the arithmetic
mean of probabilities, computed stably in log space; member order never
changes the result (summation over members is order-canonicalized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tr
from .bpe import Vocabulary

MT_MAX_LEN_EXTRA = 10
ASR_MAX_LEN_EXTRA = 20


@dataclass(frozen=True)
class Hypothesis:
    """A (partial) decode; tokens exclude the forced initial token."""

    tokens: tuple
    logprob: float
    finished: bool = False

    def score(self, length_penalty: float) -> float:
        return self.logprob / max(len(self.tokens), 1) ** length_penalty


@dataclass
class DecodeConfig:
    beam_size: int = 4
    max_len_factor: float | None = None  # None: 2.0 for mt, 1.0 for asr
    length_penalty: float = 1.0
    initial_token: str = "[BOS]"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.length_penalty < 0:
            raise ValueError(f"length_penalty must be >= 0, got {self.length_penalty}")


def combine_logprobs(logprobs: list[np.ndarray]) -> np.ndarray:
    """log of the arithmetic mean of probabilities given per-model logprobs.

    Elementwise-sorts the member axis before summing so the result is
    bitwise invariant to member order.
    """
    stack = np.stack(logprobs)
    if stack.shape[0] == 1:
        return stack[0]
    mx = stack.max(axis=0)
    terms = np.exp(stack - mx)
    terms.sort(axis=0)
    return mx + np.log(terms.sum(axis=0)) - np.log(stack.shape[0])


def _check_ensemble(models: list[tr.ModelParameters]) -> None:
    if not models:
        raise ValueError("ensemble needs at least one model")
    first = models[0].config
    for m in models[1:]:
        c = m.config
        if (c.kind, c.vocab_size, c.src_vocab_size, c.n_specials) != (
                first.kind, first.vocab_size, first.src_vocab_size, first.n_specials):
            raise ValueError(
                "ensemble members disagree on kind/vocabulary: "
                f"{(first.kind, first.vocab_size)} vs {(c.kind, c.vocab_size)}"
            )


class EnsembleScorer:
    """Holds per-model encoder memories and scores decoder prefixes."""

    def __init__(self, models: list[tr.ModelParameters], encoder_input,
                 encoder_lengths=None):
        _check_ensemble(models)
        self.models = models
        self.memories = []
        with ad.no_grad():
            for m in models:
                self.memories.append(tr.encode(m, encoder_input, encoder_lengths))
        self.encoder_length = self.memories[0][0].shape[1]

    def logprobs(self, prefix_ids: np.ndarray) -> np.ndarray:
        """Ensemble next-token log-probabilities for (K, L) prefixes -> (K, V)."""
        per_model = []
        with ad.no_grad():
            for m, (memory, valid) in zip(self.models, self.memories):
                k = prefix_ids.shape[0]
                mem = memory if memory.shape[0] == k else ad.Tensor(
                    np.broadcast_to(memory.data, (k,) + memory.shape[1:]))
                val = valid if valid.shape[0] == k else np.broadcast_to(valid, (k,) + valid.shape[1:])
                logits = tr.decode_logits(m, mem, val, prefix_ids)
                per_model.append(ad.log_softmax(logits.data[:, -1, :].astype(np.float64)))
        return combine_logprobs(per_model)


def ensemble_logprob(models: list[tr.ModelParameters], encoder_input,
                     prefix_ids: np.ndarray, encoder_lengths=None) -> np.ndarray:
    """One-shot next-token distribution request for given decoder prefixes."""
    scorer = EnsembleScorer(models, encoder_input, encoder_lengths)
    return scorer.logprobs(np.asarray(prefix_ids))


def default_max_len(kind: str, encoder_length: int, factor: float | None) -> int:
    if factor is None:
        factor = 2.0 if kind == "mt" else 1.0
    extra = MT_MAX_LEN_EXTRA if kind == "mt" else ASR_MAX_LEN_EXTRA
    return int(round(factor * encoder_length)) + extra


def beam_over_logprob_fn(logprob_fn, cfg: DecodeConfig, initial_id: int,
                         eos_id: int, max_len: int,
                         banned_ids=()) -> list[Hypothesis]:
    """Core beam loop over an arbitrary prefix -> (K, V) logprob function.

    Each step considers the top beam_size candidates over all live
    expansions; an [EOS] candidate finalizes and permanently consumes its
    slot, so beam_size 1 is exactly a greedy argmax rollout. Ties break
    toward the lower token id. Hypotheses still alive at max_len return
    unfinished. Ranking is logprob / len(tokens)^alpha.
    """
    live = [Hypothesis(tokens=(), logprob=0.0)]
    finished: list[Hypothesis] = []
    banned_ids = set(banned_ids)

    def kept_scores():
        return sorted((h.score(cfg.length_penalty) for h in finished), reverse=True)

    for _ in range(max_len):
        if not live:
            break
        prefixes = np.array([(initial_id,) + h.tokens for h in live], dtype=np.int64)
        lp = np.asarray(logprob_fn(prefixes))
        scored = []
        for i, h in enumerate(live):
            row = lp[i]
            order = np.argsort(-row, kind="stable")[: cfg.beam_size + len(banned_ids)]
            for v in order:
                if int(v) in banned_ids:
                    continue
                scored.append((h.logprob + float(row[v]), i, int(v)))
        # higher cumulative logprob first; ties -> lower token id, then older hyp
        scored.sort(key=lambda c: (-c[0], c[2], c[1]))
        live_next = []
        for logprob, i, v in scored[: cfg.beam_size]:
            if v == eos_id:
                finished.append(Hypothesis(live[i].tokens + (v,), logprob, finished=True))
            else:
                live_next.append(Hypothesis(live[i].tokens + (v,), logprob))
        if len(finished) >= cfg.beam_size:
            # a live hyp ends with logprob <= current and len <= max_len + 1,
            # so its best achievable score is logprob / (max_len+1)^alpha
            finished.sort(key=lambda h: (-h.score(cfg.length_penalty), h.tokens))
            finished = finished[: cfg.beam_size]
            bound = (max_len + 1) ** cfg.length_penalty
            worst = kept_scores()[-1]
            live_next = [h for h in live_next if h.logprob / bound > worst]
        live = live_next

    results = finished + live
    results.sort(key=lambda h: (-h.score(cfg.length_penalty), h.tokens))
    return results


def beam_search(models, encoder_input, cfg: DecodeConfig, vocab: Vocabulary,
                encoder_lengths=None) -> list[Hypothesis]:
    """Ensemble beam search over one utterance.

    The forced initial token (``[BOS]`` or a source tag) is consumed as
    decoder input but never appears in the returned tokens. PAD/BOS and
    source tags are banned from expansion, so output tokens are text and
    [EOS] only.
    """
    if isinstance(models, tr.ModelParameters):
        models = [models]
    init_id = vocab.id_of.get(cfg.initial_token)
    if init_id is None or init_id >= models[0].config.n_specials:
        raise ValueError(
            f"initial token {cfg.initial_token!r} is not a special token of this vocabulary"
        )
    scorer = EnsembleScorer(models, encoder_input, encoder_lengths)
    kind = models[0].config.kind
    max_len = default_max_len(kind, scorer.encoder_length, cfg.max_len_factor)
    banned = {vocab.pad_id, vocab.bos_id} | {vocab.id_of[t] for t in vocab.tags}
    return beam_over_logprob_fn(scorer.logprobs, cfg, init_id, vocab.eos_id,
                                max_len, banned_ids=banned)


def hypothesis_text(vocab: Vocabulary, hyp: Hypothesis) -> str:
    """Subword-decoded surface text, without the trailing [EOS]."""
    from . import bpe
    toks = hyp.tokens[:-1] if hyp.finished else hyp.tokens
    return bpe.decode(vocab, list(toks))
