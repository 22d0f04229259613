"""Transformer models and checkpoint I/O.

Two network kinds share one pre-norm encoder/decoder implementation:

* ``asr`` — encoder front end is two stride-2 1-d convolutions (kernel 5)
  over 80-channel features, giving 4x time downsampling, then sinusoidal
  positions and the self-attention stack.
* ``mt`` — encoder front end is a scaled token embedding.

Checkpoints are a length-prefixed UTF-8 JSON header followed by the named
tensors as little-endian float32, so round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
NEG_INF = -1e9


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    kind: str  # "asr" | "mt"
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_hidden: int = 64
    d_ffn: int = 128
    vocab_size: int = 0        # decoder/output vocabulary
    src_vocab_size: int = 0    # MT source vocabulary; 0 for ASR
    n_mels: int = 80           # ASR input channels
    n_specials: int = 7        # PAD/BOS/EOS/UNK + source tags; lowest ids
    dropout: float = 0.1
    conv_layers: int = 2
    conv_kernel: int = 5
    conv_stride: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("asr", "mt"):
            raise ValueError(f"unknown model kind {self.kind!r}; expected 'asr' or 'mt'")
        if self.d_hidden % self.n_heads != 0:
            raise ValueError(
                f"d_hidden {self.d_hidden} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if self.kind == "mt" and self.src_vocab_size <= 0:
            raise ValueError("mt models need a positive src_vocab_size")
        if self.kind == "asr" and self.src_vocab_size != 0:
            raise ValueError("asr models take features, not source tokens; src_vocab_size must be 0")
        for name in ("n_encoder_layers", "n_decoder_layers", "n_heads", "d_hidden", "d_ffn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kind == "asr" and (self.conv_layers < 1 or self.conv_kernel < 1 or self.conv_stride < 1):
            raise ValueError("asr conv front end needs positive layers/kernel/stride")


@dataclass
class ModelParameters:
    tensors: dict[str, Tensor]
    config: ModelConfig
    step: int = 0
    metadata: dict = field(default_factory=dict)

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
             for k, v in self.tensors.items()},
            self.config, self.step, dict(self.metadata))


def _attn_names(prefix: str, d: int):
    for p in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{p}", (d, d)
    for p in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.{p}", (d,)


def _ffn_names(prefix: str, d: int, f: int):
    yield f"{prefix}.w1", (d, f)
    yield f"{prefix}.b1", (f,)
    yield f"{prefix}.w2", (f, d)
    yield f"{prefix}.b2", (d,)


def _ln_names(prefix: str, d: int):
    yield f"{prefix}.g", (d,)
    yield f"{prefix}.b", (d,)


def parameter_spec(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map; the single source of truth for layouts."""
    d, f = cfg.d_hidden, cfg.d_ffn
    spec: dict[str, tuple] = {}

    def put(pairs):
        for name, shape in pairs:
            spec[name] = shape

    if cfg.kind == "asr":
        c_in = cfg.n_mels
        for i in range(cfg.conv_layers):
            spec[f"enc.conv{i}.w"] = (cfg.conv_kernel, c_in, d)
            spec[f"enc.conv{i}.b"] = (d,)
            c_in = d
    else:
        spec["enc.embed"] = (cfg.src_vocab_size, d)
    for i in range(cfg.n_encoder_layers):
        put(_ln_names(f"enc.l{i}.ln1", d))
        put(_attn_names(f"enc.l{i}.attn", d))
        put(_ln_names(f"enc.l{i}.ln2", d))
        put(_ffn_names(f"enc.l{i}.ffn", d, f))
    put(_ln_names("enc.ln", d))

    spec["dec.embed"] = (cfg.vocab_size, d)
    for i in range(cfg.n_decoder_layers):
        put(_ln_names(f"dec.l{i}.ln1", d))
        put(_attn_names(f"dec.l{i}.self", d))
        put(_ln_names(f"dec.l{i}.ln2", d))
        put(_attn_names(f"dec.l{i}.cross", d))
        put(_ln_names(f"dec.l{i}.ln3", d))
        put(_ffn_names(f"dec.l{i}.ffn", d, f))
    put(_ln_names("dec.ln", d))
    spec["out.w"] = (d, cfg.vocab_size)
    spec["out.b"] = (cfg.vocab_size,)
    return spec


def expected_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_spec(cfg).values())


def _init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 3:  # conv kernels: fan over kernel taps
        k, c_in, c_out = shape
        limit = math.sqrt(6.0 / (k * c_in + k * c_out))
    else:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParameters:
    """Deterministically initialized parameters for the given config."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_spec(cfg).items():
        tensors[name] = Tensor(_init_array(name, shape, rng).astype(dtype), requires_grad=True)
    return ModelParameters(tensors, cfg, step=0)


# ---------------------------------------------------------------------------
# forward pass

_pe_cache: dict[tuple, np.ndarray] = {}


def positional_encoding(length: int, d: int, dtype) -> np.ndarray:
    key = (length, d, np.dtype(dtype).str)
    pe = _pe_cache.get(key)
    if pe is None:
        pos = np.arange(length, dtype=np.float64)[:, None]
        i = np.arange(d, dtype=np.float64)[None, :]
        rad = pos / np.power(10000.0, 2.0 * (i // 2) / d)
        pe = np.where(i.astype(int) % 2 == 0, np.sin(rad), np.cos(rad)).astype(dtype)
        _pe_cache[key] = pe
    return pe


def conv_output_length(t: int, cfg: ModelConfig) -> int:
    pad = cfg.conv_kernel // 2
    for _ in range(cfg.conv_layers):
        t = ad.conv1d_output_length(t, cfg.conv_kernel, cfg.conv_stride, pad)
    return t


def _attention(params: dict, prefix: str, q_in: Tensor, kv_in: Tensor,
               disallow: np.ndarray | None, n_heads: int,
               dropout_p: float, rng) -> Tensor:
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    dk = d // n_heads

    def heads(x, l):
        x = ad.reshape(x, (b, l, n_heads, dk))
        return ad.transpose(x, (0, 2, 1, 3))

    q = heads(ad.add(ad.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), lq)
    k = heads(ad.add(ad.matmul(kv_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), lk)
    v = heads(ad.add(ad.matmul(kv_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), lk)

    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if disallow is not None:
        scores = ad.masked_fill(scores, disallow, NEG_INF)
    att = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(att, v)  # (B, H, Lq, dk)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    out = ad.add(ad.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return ad.dropout(out, dropout_p, rng)


def _ffn(params: dict, prefix: str, x: Tensor, dropout_p: float, rng) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    out = ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return ad.dropout(out, dropout_p, rng)


def _ln(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def encode(params: ModelParameters, encoder_input: np.ndarray,
           encoder_lengths: np.ndarray | None = None,
           train_rng=None) -> tuple[Tensor, np.ndarray]:
    """Run the encoder. Returns (memory (B,S,d), valid mask (B,S) bool).

    ASR input: float features (B, T, n_mels) with optional true frame
    lengths (padding must be zeros). MT input: int token ids (B, S) padded
    with PAD id 0.
    """
    cfg = params.config
    p = params.tensors
    dropout_p = cfg.dropout if train_rng is not None else 0.0

    if cfg.kind == "asr":
        x = np.asarray(encoder_input)
        if x.ndim != 3 or x.shape[2] != cfg.n_mels:
            raise ValueError(
                f"asr encoder expects (B, T, {cfg.n_mels}) features, got {x.shape}"
            )
        if encoder_lengths is None:
            encoder_lengths = np.full(x.shape[0], x.shape[1], dtype=int)
        h = Tensor(x)
        pad = cfg.conv_kernel // 2
        for i in range(cfg.conv_layers):
            h = ad.relu(ad.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"],
                                  stride=cfg.conv_stride, padding=pad))
        s = h.shape[1]
        out_lengths = np.array([conv_output_length(int(l), cfg) for l in encoder_lengths])
        valid = np.arange(s)[None, :] < out_lengths[:, None]
    else:
        ids = np.asarray(encoder_input)
        if ids.ndim != 2:
            raise ValueError(f"mt encoder expects (B, S) token ids, got shape {ids.shape}")
        valid = ids != 0  # PAD is always id 0
        h = ad.mul(ad.embedding(p["enc.embed"], ids), math.sqrt(cfg.d_hidden))
        s = ids.shape[1]

    h = ad.add(h, positional_encoding(s, cfg.d_hidden, h.dtype))
    h = ad.dropout(h, dropout_p, train_rng)
    disallow = None if bool(valid.all()) else ~valid[:, None, None, :]
    for i in range(cfg.n_encoder_layers):
        x = _ln(p, f"enc.l{i}.ln1", h)
        h = ad.add(h, _attention(p, f"enc.l{i}.attn", x, x, disallow,
                                 cfg.n_heads, dropout_p, train_rng))
        h = ad.add(h, _ffn(p, f"enc.l{i}.ffn", _ln(p, f"enc.l{i}.ln2", h), dropout_p, train_rng))
    return _ln(p, "enc.ln", h), valid


def decode_logits(params: ModelParameters, memory: Tensor, memory_valid: np.ndarray,
                  decoder_input: np.ndarray, pad_id: int | None = None,
                  train_rng=None) -> Tensor:
    """Run the decoder over teacher-forced input ids; returns (B, L, V) logits."""
    cfg = params.config
    p = params.tensors
    dropout_p = cfg.dropout if train_rng is not None else 0.0
    ids = np.asarray(decoder_input)
    if ids.ndim != 2:
        raise ValueError(f"decoder expects (B, L) token ids, got shape {ids.shape}")
    b, l = ids.shape

    h = ad.mul(ad.embedding(p["dec.embed"], ids), math.sqrt(cfg.d_hidden))
    h = ad.add(h, positional_encoding(l, cfg.d_hidden, h.dtype))
    h = ad.dropout(h, dropout_p, train_rng)

    causal = np.triu(np.ones((l, l), dtype=bool), k=1)[None, None]
    if pad_id is not None:
        key_pad = (ids == pad_id)[:, None, None, :]
        self_disallow = causal | key_pad
    else:
        self_disallow = causal
    cross_disallow = None if bool(memory_valid.all()) else ~memory_valid[:, None, None, :]

    for i in range(cfg.n_decoder_layers):
        x = _ln(p, f"dec.l{i}.ln1", h)
        h = ad.add(h, _attention(p, f"dec.l{i}.self", x, x, self_disallow,
                                 cfg.n_heads, dropout_p, train_rng))
        h = ad.add(h, _attention(p, f"dec.l{i}.cross", _ln(p, f"dec.l{i}.ln2", h),
                                 memory, cross_disallow, cfg.n_heads, dropout_p, train_rng))
        h = ad.add(h, _ffn(p, f"dec.l{i}.ffn", _ln(p, f"dec.l{i}.ln3", h), dropout_p, train_rng))
    h = _ln(p, "dec.ln", h)
    return ad.add(ad.matmul(h, p["out.w"]), p["out.b"])


def forward_step(params: ModelParameters, encoder_input: np.ndarray,
                 decoder_input: np.ndarray, encoder_lengths: np.ndarray | None = None,
                 pad_id: int | None = None, train_rng=None) -> Tensor:
    """Full forward pass: logits (batch, tgt_len, vocab).

    decoder_input rows must begin with [BOS] or a source tag (an id in the
    specials block); lengths are padded with pad_id.
    """
    ids = np.asarray(decoder_input)
    if ids.size and (ids[:, 0] >= params.config.n_specials).any():
        raise ValueError(
            "decoder input must begin with [BOS] or a source tag "
            f"(id < {params.config.n_specials}), got first ids {ids[:, 0]!r}"
        )
    memory, valid = encode(params, encoder_input, encoder_lengths, train_rng)
    return decode_logits(params, memory, valid, decoder_input, pad_id, train_rng)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParameters, path, metadata: dict | None = None) -> None:
    """Write header + little-endian float32 tensor payload."""
    entries = []
    payload = bytearray()
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({
            "name": name,
            "dtype": "<f4",
            "shape": list(arr.shape),
            "offset": len(payload),
        })
        payload.extend(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "step": params.step,
        "metadata": metadata if metadata is not None else params.metadata,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path) -> ModelParameters:
    """Read and validate a checkpoint; raises distinct errors for version,
    shape, and truncation problems."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointTruncatedError(f"{path}: file too short for header length prefix")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated ({len(raw) - 8} of {hlen} bytes)")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint header: {e}") from None
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid config in header: {e}") from None

    spec = parameter_spec(config)
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(spec):
        missing = sorted(set(spec) - set(entries))
        extra = sorted(set(entries) - set(spec))
        raise CheckpointShapeError(
            f"{path}: tensor names do not match config (missing {missing}, extra {extra})"
        )
    payload = raw[8 + hlen:]
    tensors = {}
    for name, shape in spec.items():
        e = entries[name]
        if tuple(e["shape"]) != tuple(shape):
            raise CheckpointShapeError(
                f"{path}: tensor {name} has shape {e['shape']}, config implies {list(shape)}"
            )
        nbytes = int(np.prod(shape)) * 4
        off = e["offset"]
        if off + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload truncated reading tensor {name}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=off)
        tensors[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return ModelParameters(tensors, config, step=int(header.get("step", 0)),
                           metadata=header.get("metadata", {}))
