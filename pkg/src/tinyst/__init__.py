"""tinyst: a desk-scale cascade speech translation toolkit.

Pipeline: energy VAD segmentation -> log-Mel/CMVN features ->
tag-conditioned transformer ASR -> pretrained + fine-tuned transformer MT
-> ensemble beam decoding, scored with WER/BLEU/TER/CharacTER. Everything
runs on synthetic tone-word corpora so the full experiment fits on a
laptop CPU.
"""

__version__ = "0.1.0"
