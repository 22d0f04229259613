"""Command line interface.

Subcommands: gen-synth, train-asr, train-mt, finetune, avg-ckpt, decode,
pipeline, score. All accept --config and --seed; decoding commands accept
--tag, --beam, --ensemble.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import beam as beam_mod
from . import bpe
from . import cascade as casc
from . import synth
from . import training as tn
from . import transformer as tr


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed")


def _model_config_from_file(path, kind: str, **overrides) -> tr.ModelConfig:
    kwargs = dict(kind=kind)
    if path:
        fields = {f.name: f for f in dataclasses.fields(tr.ModelConfig)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown ModelConfig field {key!r}")
            kwargs[key] = value if key == "kind" else (
                float(value) if key == "dropout" else int(value))
    kwargs.update(overrides)
    return tr.ModelConfig(**kwargs)


def _train_config(args) -> tn.TrainConfig:
    cfg = tn.read_train_config(args.config) if args.config else tn.TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_gen_synth(args) -> int:
    cfg = synth.parse_synth_config(args.config) if args.config else synth.SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    index = synth.generate_corpus(cfg, args.output)
    print(f"wrote synthetic corpus to {args.output}")
    for k in sorted(index):
        if k.startswith(("asr_", "mt_", "recordings")):
            print(f"  {k}: {index[k]}")
    return 0


def cmd_train_asr(args) -> int:
    cfg = _train_config(args)
    records = tn.load_manifest(args.manifest)
    transcripts = [r["transcript"] for r in records]
    tags = sorted({r["source_tag"] for r in records})
    vocab = bpe.learn_bpe(transcripts, target_size=args.bpe_size, tags=tags)
    samples = tn.prepare_asr_samples(args.manifest, vocab)
    mcfg = _model_config_from_file(args.model_config, kind="asr",
                                   vocab_size=len(vocab), n_specials=len(vocab.specials))
    model = tr.build_model(mcfg, seed=cfg.seed)
    from .features import SpecAugmentConfig
    augment = None if args.no_augment else SpecAugmentConfig()
    result = tn.train_asr(model, samples, vocab, cfg,
                          multi_source=not args.no_multi_source,
                          augment=augment, out_dir=args.output, quiet=False)
    print(f"trained {len(result.checkpoints)} epochs -> {args.output}")
    return 0


def _learn_mt_vocabs(records, bpe_size, tags=()):
    src_vocab = bpe.learn_bpe([r["src_text"] for r in records], target_size=bpe_size, tags=tags)
    tgt_vocab = bpe.learn_bpe([r["tgt_text"] for r in records], target_size=bpe_size, tags=tags)
    return src_vocab, tgt_vocab


def cmd_train_mt(args) -> int:
    cfg = _train_config(args)
    records = tn.load_manifest(args.manifest)
    src_vocab, tgt_vocab = _learn_mt_vocabs(records, args.bpe_size)
    mcfg = _model_config_from_file(args.model_config, kind="mt",
                                   vocab_size=len(tgt_vocab), src_vocab_size=len(src_vocab),
                                   n_specials=len(tgt_vocab.specials))
    model = tr.build_model(mcfg, seed=cfg.seed)
    samples = tn.prepare_mt_samples(args.manifest, src_vocab, tgt_vocab)
    result = tn.train_mt(model, samples, src_vocab, tgt_vocab, cfg,
                         out_dir=args.output, quiet=False)
    print(f"pretrained {len(result.checkpoints)} checkpoints -> {args.output}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _train_config(args)
    model = tr.load_checkpoint(args.init)
    src_vocab = bpe.Vocabulary.from_json(model.metadata["src_vocab"])
    tgt_vocab = bpe.Vocabulary.from_json(model.metadata["vocab"])
    samples = tn.prepare_mt_samples(args.manifest, src_vocab, tgt_vocab)
    result = tn.finetune(model, samples, src_vocab, tgt_vocab, cfg,
                         steps=args.steps, out_dir=args.output, quiet=False)
    print(f"fine-tuned for {cfg.finetune_steps if args.steps is None else args.steps} "
          f"steps, {len(result.checkpoints)} checkpoints -> {args.output}")
    return 0


def cmd_avg_ckpt(args) -> int:
    avg = tn.average_checkpoints(list(args.checkpoints))
    tr.save_checkpoint(avg, args.output)
    print(f"averaged {len(args.checkpoints)} checkpoints -> {args.output}")
    return 0


def _split_paths(value: str) -> list[str]:
    return [p for p in value.split(",") if p]


def cmd_decode(args) -> int:
    models = [tr.load_checkpoint(p) for p in _split_paths(args.ensemble)]
    vocab = bpe.Vocabulary.from_json(models[0].metadata["vocab"])
    kind = models[0].config.kind
    initial = args.tag if args.tag else "[BOS]"
    dcfg = beam_mod.DecodeConfig(beam_size=args.beam, initial_token=initial)
    out_lines = []
    trace = []
    if kind == "asr":
        samples_vocab = vocab  # targets only; transcripts unused at decode time
        samples = tn.prepare_asr_samples(args.manifest, samples_vocab)
        for s in samples:
            hyps = beam_mod.beam_search(models, s.features[None], dcfg, vocab)
            text = beam_mod.hypothesis_text(vocab, hyps[0]) if hyps else ""
            out_lines.append(text)
            trace.append({"utterance_id": s.utterance_id, "text": text,
                          "logprob": hyps[0].logprob if hyps else 0.0,
                          "tag": initial})
    else:
        src_vocab = bpe.Vocabulary.from_json(models[0].metadata["src_vocab"])
        for rec in tn.load_manifest(args.manifest):
            ids = np.array([bpe.encode(src_vocab, rec["src_text"])], dtype=np.int64)
            hyps = beam_mod.beam_search(models, ids, dcfg, vocab)
            text = beam_mod.hypothesis_text(vocab, hyps[0]) if hyps else ""
            out_lines.append(text)
            trace.append({"utterance_id": rec.get("utterance_id", ""), "text": text,
                          "logprob": hyps[0].logprob if hyps else 0.0,
                          "tag": initial})
    Path(args.output).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    with open(str(args.output) + ".jsonl", "w", encoding="utf-8") as f:
        for t in trace:
            f.write(json.dumps(t, sort_keys=True) + "\n")
    print(f"decoded {len(out_lines)} inputs -> {args.output}")
    return 0


def cmd_pipeline(args) -> int:
    asr_models = _split_paths(args.ensemble)
    mt_models = _split_paths(args.mt_ensemble)
    recordings = []
    if args.audio:
        recordings.append((Path(args.audio).stem, args.audio))
    if args.manifest:
        base = Path(args.manifest).parent
        for rec in tn.load_manifest(args.manifest):
            recordings.append((rec["recording_id"], base / rec["audio_path"]))
    if not recordings:
        raise ValueError("pipeline needs --audio or --manifest")
    all_results = []
    for rec_id, path in recordings:
        all_results.extend(casc.run_cascade(
            path, asr_models, mt_models, tag=args.tag or casc.DEFAULT_TAG,
            asr_beam=args.beam, mt_beam=args.beam, recording_id=rec_id))
    Path(args.output).write_text(
        "\n".join(r.translation for r in all_results) + "\n", encoding="utf-8")
    casc.write_trace(all_results, str(args.output) + ".jsonl")
    print(f"pipeline: {len(recordings)} recordings -> {len(all_results)} segments "
          f"-> {args.output}")
    return 0


def cmd_score(args) -> int:
    report = casc.score_run(args.hyp, args.ref, set_name=args.set_name,
                            with_wer=args.wer)
    print(report.render_table())
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tinyst",
        description="Desk-scale cascade speech translation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic tone-word corpus")
    _add_common(p)
    p.add_argument("--output", metavar="PATH", required=True)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train-asr", help="train the tag-conditioned ASR model")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", required=True)
    p.add_argument("--output", metavar="PATH", required=True)
    p.add_argument("--model-config", metavar="PATH")
    p.add_argument("--bpe-size", type=int, default=20000)
    p.add_argument("--no-multi-source", action="store_true",
                   help="train with [BOS] instead of source tags")
    p.add_argument("--no-augment", action="store_true", help="disable SpecAugment")
    p.set_defaults(fn=cmd_train_asr)

    p = sub.add_parser("train-mt", help="pretrain the MT model")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", required=True)
    p.add_argument("--output", metavar="PATH", required=True)
    p.add_argument("--model-config", metavar="PATH")
    p.add_argument("--bpe-size", type=int, default=20000)
    p.set_defaults(fn=cmd_train_mt)

    p = sub.add_parser("finetune", help="fine-tune a pretrained MT model in-domain")
    _add_common(p)
    p.add_argument("--manifest", metavar="PATH", required=True)
    p.add_argument("--init", metavar="PATH", required=True, help="pretrained checkpoint")
    p.add_argument("--output", metavar="PATH", required=True)
    p.add_argument("--steps", type=int, help="override finetune_steps")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("avg-ckpt", help="average checkpoint parameters")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+", metavar="CKPT")
    p.add_argument("--output", metavar="PATH", required=True)
    p.set_defaults(fn=cmd_avg_ckpt)

    p = sub.add_parser("decode", help="beam-decode a manifest with one model kind")
    _add_common(p)
    p.add_argument("--ensemble", metavar="PATH[,PATH...]", required=True)
    p.add_argument("--manifest", metavar="PATH", required=True)
    p.add_argument("--output", metavar="PATH", required=True)
    p.add_argument("--tag", metavar="NAME", help="forced initial token (default [BOS])")
    p.add_argument("--beam", type=int, default=4, metavar="N")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("pipeline", help="full cascade on recordings")
    _add_common(p)
    p.add_argument("--ensemble", metavar="PATH[,PATH...]", required=True,
                   help="ASR checkpoint(s)")
    p.add_argument("--mt-ensemble", metavar="PATH[,PATH...]", required=True,
                   help="MT checkpoint(s)")
    p.add_argument("--audio", metavar="PATH", help="single recording WAV")
    p.add_argument("--manifest", metavar="PATH", help="recordings manifest JSONL")
    p.add_argument("--output", metavar="PATH", required=True)
    p.add_argument("--tag", metavar="NAME", default=casc.DEFAULT_TAG)
    p.add_argument("--beam", type=int, default=4, metavar="N")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("score", help="score line-aligned hyp/ref files")
    _add_common(p)
    p.add_argument("--hyp", metavar="PATH", required=True)
    p.add_argument("--ref", metavar="PATH", required=True)
    p.add_argument("--output", metavar="PATH", help="write JSON report here")
    p.add_argument("--set-name", metavar="NAME")
    p.add_argument("--wer", action="store_true", help="include WER in the report")
    p.set_defaults(fn=cmd_score)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, tr.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
