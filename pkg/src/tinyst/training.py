"""Training: multi-source ASR, MT pretrain + fine-tune, optimization and
batching, checkpoint averaging, and toy back-translation.

Multi-source training replaces the decoder's [BOS] with a per-sample data
source tag, so next-token prediction is conditioned on corpus provenance;
at inference the tag is forced to steer output style. All randomness flows
from named seeds, so runs are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import beam as beam_mod
from . import bpe
from . import transformer as tr
from .features import (FeatureConfig, FeatureMatrix, SpecAugmentConfig, Waveform,
                       cmvn, logmel, read_wav, spec_augment)


@dataclass
class TrainConfig:
    max_frames_per_batch: int = 40000
    max_tokens_per_batch: int = 32768
    warmup: int = 10000
    peak_lr: float = 5e-4
    finetune_lr: float = 1e-5
    epochs: int = 10
    avg_last_n: int = 4
    seed: int = 0
    label_smoothing: float = 0.1
    finetune_steps: int = 10000
    grad_accum: int = 1
    max_steps: int = 0  # 0 = no cap; used for budget-matched ablations

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("max_steps", "seed"):
                if v < 0:
                    raise ValueError(f"TrainConfig.{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ValueError(f"TrainConfig.{f.name} must be positive, got {v}")


def read_train_config(path) -> TrainConfig:
    """Parse a flat key=value file whose keys are TrainConfig field names."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown TrainConfig field {key!r}")
        typ = fields[key].type
        kwargs[key] = float(value) if typ == "float" else int(value)
    return TrainConfig(**kwargs)


def write_train_config(cfg: TrainConfig, path) -> None:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_schedule(step: int, warmup: int, peak: float) -> float:
    """Inverse-sqrt with linear warmup: peak * min(step/warmup, sqrt(warmup/step))."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


class AdamState:
    """Per-tensor first/second moment estimates plus the shared step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Aborts on non-finite grads."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# samples and batching


@dataclass
class AsrSample:
    utterance_id: str
    features: np.ndarray  # (T, n_mels) float32, already CMVN-normalized
    target_ids: list[int]
    tag: str

    @property
    def cost(self) -> int:
        return self.features.shape[0]


@dataclass
class MtSample:
    utterance_id: str
    src_ids: list[int]
    tgt_ids: list[int]

    @property
    def cost(self) -> int:
        return max(len(self.src_ids), len(self.tgt_ids)) + 1


def make_batches(samples: list, cfg: TrainConfig, seed: int | None = None) -> list[list]:
    """Length-bucketed greedy packing under the frame/token budget, then the
    batch order is shuffled with the seed."""
    if not samples:
        return []
    cap = cfg.max_frames_per_batch if isinstance(samples[0], AsrSample) else cfg.max_tokens_per_batch
    for s in samples:
        if s.cost > cap:
            raise ValueError(
                f"sample {s.utterance_id!r} has cost {s.cost} exceeding the batch cap {cap}"
            )
    ordered = sorted(samples, key=lambda s: (s.cost, s.utterance_id))
    batches: list[list] = []
    cur: list = []
    cur_cost = 0
    for s in ordered:
        if cur and cur_cost + s.cost > cap:
            batches.append(cur)
            cur, cur_cost = [], 0
        cur.append(s)
        cur_cost += s.cost
    if cur:
        batches.append(cur)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    rng.shuffle(batches)
    return batches


def _spec_aug_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def assemble_asr_batch(batch: list[AsrSample], vocab: bpe.Vocabulary,
                       multi_source: bool, augment: SpecAugmentConfig | None = None,
                       epoch: int = 0, base_seed: int = 0):
    """Pad features and build shifted decoder inputs/targets.

    Per sample: decoder input = [tag (or BOS), y_1..y_n], target =
    [y_1..y_n, EOS]. Feature padding is zeros (the post-CMVN mean).
    """
    b = len(batch)
    t_max = max(s.features.shape[0] for s in batch)
    l_max = max(len(s.target_ids) for s in batch) + 1
    n_mels = batch[0].features.shape[1]
    feats = np.zeros((b, t_max, n_mels), dtype=np.float32)
    lengths = np.zeros(b, dtype=int)
    dec_in = np.full((b, l_max), vocab.pad_id, dtype=np.int64)
    targets = np.full((b, l_max), vocab.pad_id, dtype=np.int64)
    tags = np.zeros(b, dtype=np.int64)
    for i, s in enumerate(batch):
        f = s.features
        if augment is not None:
            aug = dataclasses.replace(
                augment, seed=_spec_aug_seed(base_seed, epoch, hash(s.utterance_id) & 0x7FFFFFFF))
            f = spec_augment(FeatureMatrix(f, utterance_id=s.utterance_id), aug).frames
        feats[i, : f.shape[0]] = f
        lengths[i] = f.shape[0]
        first = vocab.tag_id(s.tag) if multi_source else vocab.bos_id
        tags[i] = first
        y = list(s.target_ids)
        dec_in[i, 0] = first
        dec_in[i, 1:len(y) + 1] = y
        targets[i, :len(y)] = y
        targets[i, len(y)] = vocab.eos_id
    return feats, lengths, dec_in, targets, tags


def assemble_mt_batch(batch: list[MtSample], src_vocab: bpe.Vocabulary,
                      tgt_vocab: bpe.Vocabulary):
    b = len(batch)
    s_max = max(len(s.src_ids) for s in batch)
    l_max = max(len(s.tgt_ids) for s in batch) + 1
    src = np.full((b, s_max), src_vocab.pad_id, dtype=np.int64)
    dec_in = np.full((b, l_max), tgt_vocab.pad_id, dtype=np.int64)
    targets = np.full((b, l_max), tgt_vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(batch):
        src[i, :len(s.src_ids)] = s.src_ids
        y = list(s.tgt_ids)
        dec_in[i, 0] = tgt_vocab.bos_id
        dec_in[i, 1:len(y) + 1] = y
        targets[i, :len(y)] = y
        targets[i, len(y)] = tgt_vocab.eos_id
    return src, dec_in, targets


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: bad JSON: {e}") from None
            records.append(rec)
    return records


def prepare_asr_samples(manifest_path, vocab: bpe.Vocabulary,
                        feat_cfg: FeatureConfig | None = None) -> list[AsrSample]:
    """Load audio, extract log-Mel + CMVN features, and encode transcripts."""
    feat_cfg = feat_cfg or FeatureConfig()
    base = Path(manifest_path).parent
    samples = []
    for rec in load_manifest(manifest_path):
        for key in ("utterance_id", "audio_path", "transcript", "source_tag"):
            if key not in rec:
                raise ValueError(f"ASR manifest record missing {key!r}: {rec}")
        audio_path = Path(rec["audio_path"])
        if not audio_path.is_absolute():
            audio_path = base / audio_path
        wave = read_wav(audio_path)
        if "offset_s" in rec or "duration_s" in rec:
            sr = wave.sample_rate
            lo = int(round(rec.get("offset_s", 0.0) * sr))
            n = int(round(rec["duration_s"] * sr)) if "duration_s" in rec else len(wave.samples) - lo
            wave = Waveform(wave.samples[lo:lo + n], sr)
        feat = cmvn(logmel(wave, feat_cfg, utterance_id=rec["utterance_id"]))
        samples.append(AsrSample(
            utterance_id=rec["utterance_id"],
            features=feat.frames.astype(np.float32),
            target_ids=bpe.encode(vocab, rec["transcript"]),
            tag=rec["source_tag"],
        ))
    return samples


def prepare_mt_samples(manifest_path, src_vocab: bpe.Vocabulary,
                       tgt_vocab: bpe.Vocabulary) -> list[MtSample]:
    samples = []
    for i, rec in enumerate(load_manifest(manifest_path)):
        if "src_text" not in rec or "tgt_text" not in rec:
            raise ValueError(f"MT manifest record missing src_text/tgt_text: {rec}")
        samples.append(MtSample(
            utterance_id=rec.get("utterance_id", f"mt{i:06d}"),
            src_ids=bpe.encode(src_vocab, rec["src_text"]),
            tgt_ids=bpe.encode(tgt_vocab, rec["tgt_text"]),
        ))
    return samples


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: tr.ModelParameters
    checkpoints: list  # paths when out_dir given, else ModelParameters
    losses: list[float] = field(default_factory=list)


def _checkpoint(params: tr.ModelParameters, out_dir, name: str,
                metadata: dict, checkpoints: list) -> None:
    if out_dir is None:
        snap = tr.ModelParameters(
            {k: ad.Tensor(v.data.copy(), requires_grad=True) for k, v in params.tensors.items()},
            params.config, params.step, dict(metadata))
        checkpoints.append(snap)
    else:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        tr.save_checkpoint(params, path, metadata=metadata)
        checkpoints.append(str(path))


def train_asr(params: tr.ModelParameters, samples: list[AsrSample],
              vocab: bpe.Vocabulary, cfg: TrainConfig, *, multi_source: bool = True,
              augment: SpecAugmentConfig | None = None, out_dir=None,
              batch_hook=None, quiet: bool = True) -> TrainResult:
    """Tag-conditioned ASR training; one checkpoint per epoch.

    With multi_source, each decoder input starts with the sample's source
    tag instead of [BOS].
    """
    for s in samples:
        if multi_source:
            vocab.tag_id(s.tag)  # unknown tag -> error before training starts
    metadata = {"vocab": vocab.to_json(), "multi_source": multi_source}
    state = AdamState()
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    result = TrainResult(params, [])
    step = params.step
    stop = False
    for epoch in range(cfg.epochs):
        if stop:
            break
        batches = make_batches(samples, cfg, seed=cfg.seed + epoch)
        pending = 0
        for bi, batch in enumerate(batches):
            feats, lengths, dec_in, targets, tags = assemble_asr_batch(
                batch, vocab, multi_source, augment, epoch, cfg.seed)
            if batch_hook is not None:
                batch_hook(dec_in=dec_in, targets=targets, tags=tags)
            rng = dropout_rng if params.config.dropout > 0 else None
            logits = tr.forward_step(params, feats, dec_in, encoder_lengths=lengths,
                                     pad_id=vocab.pad_id, train_rng=rng)
            loss = ad.cross_entropy(logits, targets, pad_id=vocab.pad_id,
                                    label_smoothing=cfg.label_smoothing)
            ad.backward(loss)
            result.losses.append(loss.item())
            pending += 1
            if pending == cfg.grad_accum or bi == len(batches) - 1:
                grads = {k: t.grad / pending for k, t in params.tensors.items()
                         if t.grad is not None}
                step += 1
                adam_step(params.tensors, grads, state,
                          lr_schedule(step, cfg.warmup, cfg.peak_lr))
                for t in params.tensors.values():
                    t.zero_grad()
                pending = 0
                if cfg.max_steps and step - params.step >= cfg.max_steps:
                    stop = True
                    break
        epoch_params = tr.ModelParameters(params.tensors, params.config, step, metadata)
        _checkpoint(epoch_params, out_dir, f"asr_epoch{epoch:03d}.ckpt", metadata,
                    result.checkpoints)
        if not quiet:
            print(f"epoch {epoch}: mean loss {np.mean(result.losses[-len(batches):]):.4f}")
    params.step = step
    params.metadata = metadata
    return result


def _train_mt_loop(params: tr.ModelParameters, samples: list[MtSample],
                   src_vocab: bpe.Vocabulary, tgt_vocab: bpe.Vocabulary,
                   cfg: TrainConfig, *, steps: int | None, constant_lr: float | None,
                   out_dir, ckpt_prefix: str, ckpt_every: int | None,
                   quiet: bool = True) -> TrainResult:
    metadata = {"src_vocab": src_vocab.to_json(), "vocab": tgt_vocab.to_json()}
    state = AdamState()
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    result = TrainResult(params, [])
    step0 = params.step
    step = step0
    last_saved = -1
    done = False
    epoch = 0
    while not done:
        batches = make_batches(samples, cfg, seed=cfg.seed + 31 * epoch)
        pending = 0
        for bi, batch in enumerate(batches):
            src, dec_in, targets = assemble_mt_batch(batch, src_vocab, tgt_vocab)
            rng = dropout_rng if params.config.dropout > 0 else None
            logits = tr.forward_step(params, src, dec_in, pad_id=tgt_vocab.pad_id,
                                     train_rng=rng)
            loss = ad.cross_entropy(logits, targets, pad_id=tgt_vocab.pad_id,
                                    label_smoothing=cfg.label_smoothing)
            ad.backward(loss)
            result.losses.append(loss.item())
            pending += 1
            if pending == cfg.grad_accum or bi == len(batches) - 1:
                grads = {k: t.grad / pending for k, t in params.tensors.items()
                         if t.grad is not None}
                step += 1
                lr = constant_lr if constant_lr is not None else lr_schedule(
                    step, cfg.warmup, cfg.peak_lr)
                adam_step(params.tensors, grads, state, lr)
                for t in params.tensors.values():
                    t.zero_grad()
                pending = 0
                if steps is not None and step - step0 >= steps:
                    done = True
                if cfg.max_steps and step - step0 >= cfg.max_steps:
                    done = True
                if ckpt_every and ((step - step0) % ckpt_every == 0 or done) and step != last_saved:
                    snap = tr.ModelParameters(params.tensors, params.config, step, metadata)
                    _checkpoint(snap, out_dir, f"{ckpt_prefix}_step{step:06d}.ckpt",
                                metadata, result.checkpoints)
                    last_saved = step
                if done:
                    break
        if steps is None and not done:  # epoch-driven run
            snap = tr.ModelParameters(params.tensors, params.config, step, metadata)
            _checkpoint(snap, out_dir, f"{ckpt_prefix}_epoch{epoch:03d}.ckpt",
                        metadata, result.checkpoints)
            if epoch + 1 >= cfg.epochs:
                done = True
        if not quiet:
            print(f"{ckpt_prefix} epoch {epoch}: step {step}, last loss {result.losses[-1]:.4f}")
        epoch += 1
    params.step = step
    params.metadata = metadata
    return result


def train_mt(params: tr.ModelParameters, samples: list[MtSample],
             src_vocab: bpe.Vocabulary, tgt_vocab: bpe.Vocabulary,
             cfg: TrainConfig, out_dir=None, quiet: bool = True) -> TrainResult:
    """MT pretraining: inverse-sqrt schedule, one checkpoint per epoch."""
    _check_mt_vocab(params, src_vocab, tgt_vocab)
    return _train_mt_loop(params, samples, src_vocab, tgt_vocab, cfg,
                          steps=None, constant_lr=None, out_dir=out_dir,
                          ckpt_prefix="mt", ckpt_every=None, quiet=quiet)


def finetune(params: tr.ModelParameters, samples: list[MtSample],
             src_vocab: bpe.Vocabulary, tgt_vocab: bpe.Vocabulary,
             cfg: TrainConfig, steps: int | None = None, out_dir=None,
             quiet: bool = True) -> TrainResult:
    """Domain adaptation at a constant learning rate (finetune_lr), for
    cfg.finetune_steps by default; checkpoints every quarter of the budget."""
    _check_mt_vocab(params, src_vocab, tgt_vocab)
    budget = cfg.finetune_steps if steps is None else steps
    if budget == 0:
        return TrainResult(params, [])
    return _train_mt_loop(params, samples, src_vocab, tgt_vocab, cfg,
                          steps=budget, constant_lr=cfg.finetune_lr, out_dir=out_dir,
                          ckpt_prefix="ft", ckpt_every=max(1, budget // 4), quiet=quiet)


def _check_mt_vocab(params: tr.ModelParameters, src_vocab, tgt_vocab) -> None:
    cfg = params.config
    if cfg.kind != "mt":
        raise ValueError(f"expected an mt model, got kind {cfg.kind!r}")
    if cfg.src_vocab_size != len(src_vocab) or cfg.vocab_size != len(tgt_vocab):
        raise ValueError(
            f"model/vocabulary mismatch: model expects src={cfg.src_vocab_size}, "
            f"tgt={cfg.vocab_size}; vocabularies have src={len(src_vocab)}, tgt={len(tgt_vocab)}"
        )


def evaluate_loss(params: tr.ModelParameters, samples: list, cfg: TrainConfig,
                  vocab: bpe.Vocabulary, src_vocab: bpe.Vocabulary | None = None,
                  multi_source: bool = True) -> float:
    """Mean label-smoothed cross entropy over a dataset, no dropout/augment."""
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in make_batches(samples, cfg, seed=0):
            if isinstance(batch[0], AsrSample):
                feats, lengths, dec_in, targets, _ = assemble_asr_batch(
                    batch, vocab, multi_source)
                logits = tr.forward_step(params, feats, dec_in, encoder_lengths=lengths,
                                         pad_id=vocab.pad_id)
            else:
                src, dec_in, targets = assemble_mt_batch(batch, src_vocab, vocab)
                logits = tr.forward_step(params, src, dec_in, pad_id=vocab.pad_id)
            loss = ad.cross_entropy(logits, targets, pad_id=vocab.pad_id,
                                    label_smoothing=cfg.label_smoothing)
            n = int((targets != vocab.pad_id).sum())
            total += loss.item() * n
            count += n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# checkpoint averaging and back-translation


def average_checkpoints(checkpoints: list) -> tr.ModelParameters:
    """Elementwise mean of the given checkpoints (paths or ModelParameters).

    The stack is elementwise-sorted before summation, so the result is
    bitwise invariant to input order; averaging N identical checkpoints
    reproduces them exactly.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    models = [tr.load_checkpoint(c) if not isinstance(c, tr.ModelParameters) else c
              for c in checkpoints]
    first = models[0]
    names = list(first.tensors)
    for m in models[1:]:
        if list(m.tensors) != names:
            raise ValueError("checkpoints have different tensor names; cannot average")
        for n in names:
            if m.tensors[n].shape != first.tensors[n].shape:
                raise ValueError(
                    f"tensor {n!r} shape mismatch: {m.tensors[n].shape} vs {first.tensors[n].shape}"
                )
    newest = max(models, key=lambda m: m.step)
    out = {}
    for n in names:
        stack = np.stack([m.tensors[n].data.astype(np.float64) for m in models])
        stack.sort(axis=0)
        mean = stack.sum(axis=0) / len(models)
        out[n] = ad.Tensor(mean.astype(first.tensors[n].data.dtype), requires_grad=True)
    return tr.ModelParameters(out, first.config, step=newest.step,
                              metadata=dict(newest.metadata))


def back_translate(reverse_params: tr.ModelParameters, mono_lines: list[str],
                   src_vocab: bpe.Vocabulary, tgt_vocab: bpe.Vocabulary,
                   decode_cfg: beam_mod.DecodeConfig | None = None) -> list[tuple[str, str]]:
    """Synthesize (source, target) bitext from monolingual target text.

    The reverse model translates target -> source; each output pair keeps
    the input line verbatim on the target side, in input order.
    """
    decode_cfg = decode_cfg or beam_mod.DecodeConfig()
    pairs = []
    for line in mono_lines:
        ids = np.array([bpe.encode(tgt_vocab, line)], dtype=np.int64)
        hyps = beam_mod.beam_search(reverse_params, ids, decode_cfg, src_vocab)
        src_text = beam_mod.hypothesis_text(src_vocab, hyps[0]) if hyps else ""
        pairs.append((src_text, line))
    return pairs
