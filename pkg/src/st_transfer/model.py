"""BLSTM attention encoder-decoder shared by ASR and ST.

Encoder: two tanh DNN layers (d1, d2), two 3x3 stride-2 convolutions with 16
channels (time and feature axes both halved, each followed by ReLU), flatten
to 4*d2, then a stack of bidirectional LSTMs of hidden size d3.

Decoder: embedding -> LSTM(2*d3) -> additive attention -> LSTM(2*d3) fed with
the context -> linear projection to d_o -> output layer over the vocabulary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import DimensionError, InputError, UsageError
from .text import PAD_ID

ROLES = ("encoder", "decoder-core", "embedding", "softmax")
CONV_CHANNELS = 16
# Plain 1/sqrt(fan_in) leaves the deep recurrent stack with near-uniform
# attention for many epochs; a gain of 2 trains reliably.
INIT_GAIN = 2.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d0: int = 80
    d1: int = 256
    d2: int = 128
    d3: int = 512
    d_o: int = 128
    encoder_blstm_layers: int = 3
    decoder_layers: int = 2
    attention_dim: int | None = None  # defaults to d_o

    def __post_init__(self):
        dims = (self.vocab_size, self.d0, self.d1, self.d2, self.d3, self.d_o,
                self.encoder_blstm_layers, self.decoder_layers)
        if min(dims) <= 0:
            raise UsageError(f"all model dimensions must be positive: {self}")
        if self.d2 % 4:
            raise UsageError("d2 must be divisible by 4 so the conv flatten equals 4*d2")

    @property
    def att_dim(self) -> int:
        return self.attention_dim or self.d_o

    @property
    def flatten_dim(self) -> int:
        return CONV_CHANNELS * self.d2 // 4

    @property
    def decoder_hidden(self) -> int:
        return 2 * self.d3

    def core(self) -> tuple:
        """Dimensions that must agree for parameters to be transferable."""
        return (self.d0, self.d1, self.d2, self.d3, self.d_o, self.encoder_blstm_layers,
                self.decoder_layers, self.att_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def encoder_length(t: int) -> int:
    """Frames left after the two stride-2 convolutions."""
    return ((t + 1) // 2 + 1) // 2


class ParameterSet(Mapping[str, np.ndarray]):
    """Named arrays plus exactly one role tag per name."""

    def __init__(self, arrays: Mapping[str, np.ndarray], roles: Mapping[str, str]):
        if set(arrays) != set(roles):
            raise UsageError("every parameter needs exactly one role tag")
        bad = {r for r in roles.values() if r not in ROLES}
        if bad:
            raise UsageError(f"unknown role tags {bad}")
        self.arrays = dict(arrays)
        self.roles = {k: roles[k] for k in arrays}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names_with_role(self, *roles: str) -> list[str]:
        return [k for k, r in self.roles.items() if r in roles]

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        new = dict(self.arrays)
        new.update(arrays)
        return ParameterSet(new, self.roles)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.arrays.items()}, self.roles)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.arrays.items()}, self.roles)

    def num_values(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def tensors(self) -> dict[str, Tensor]:
        return ag.parameters(self.arrays)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, role) for every parameter of ``cfg``."""
    s: dict[str, tuple[tuple[int, ...], str]] = {}
    s["enc.dnn1.W"] = ((cfg.d0, cfg.d1), "encoder")
    s["enc.dnn1.b"] = ((cfg.d1,), "encoder")
    s["enc.dnn2.W"] = ((cfg.d1, cfg.d2), "encoder")
    s["enc.dnn2.b"] = ((cfg.d2,), "encoder")
    s["enc.conv1.K"] = ((CONV_CHANNELS, 1, 3, 3), "encoder")
    s["enc.conv1.b"] = ((CONV_CHANNELS,), "encoder")
    s["enc.conv2.K"] = ((CONV_CHANNELS, CONV_CHANNELS, 3, 3), "encoder")
    s["enc.conv2.b"] = ((CONV_CHANNELS,), "encoder")
    din, k = cfg.flatten_dim, cfg.d3
    for layer in range(cfg.encoder_blstm_layers):
        for direction in ("fwd", "bwd"):
            p = f"enc.blstm{layer}.{direction}"
            s[f"{p}.Wx"] = ((din, 4 * k), "encoder")
            s[f"{p}.Wh"] = ((k, 4 * k), "encoder")
            s[f"{p}.b"] = ((4 * k,), "encoder")
        din = 2 * k
    hd, enc = cfg.decoder_hidden, 2 * cfg.d3
    s["dec.embed.W"] = ((cfg.vocab_size, cfg.d_o), "embedding")
    for layer in range(cfg.decoder_layers):
        din = cfg.d_o + enc if layer == 0 else hd + enc
        p = f"dec.lstm{layer}"
        s[f"{p}.Wx"] = ((din, 4 * hd), "decoder-core")
        s[f"{p}.Wh"] = ((hd, 4 * hd), "decoder-core")
        s[f"{p}.b"] = ((4 * hd,), "decoder-core")
    a = cfg.att_dim
    s["dec.att.Wq"] = ((hd, a), "decoder-core")
    s["dec.att.Wk"] = ((enc, a), "decoder-core")
    s["dec.att.b"] = ((a,), "decoder-core")
    s["dec.att.v"] = ((a, 1), "decoder-core")
    s["dec.proj.W"] = ((hd, cfg.d_o), "decoder-core")
    s["dec.proj.b"] = ((cfg.d_o,), "decoder-core")
    s["dec.out.W"] = ((cfg.d_o, cfg.vocab_size), "softmax")
    s["dec.out.b"] = ((cfg.vocab_size,), "softmax")
    return s


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".K"):
        return shape[1] * shape[2] * shape[3]
    if "lstm" in name:
        # recurrent convention: scale by the hidden size
        return shape[1] // 4
    return shape[0]


def init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator,
                dtype=np.float32, gain: float = INIT_GAIN) -> np.ndarray:
    """Uniform(+-gain/sqrt(fan_in)) weights, zero biases, LSTM forget bias 1."""
    if len(shape) == 1:
        out = np.zeros(shape, dtype=dtype)
        if ("lstm" in name) and name.endswith(".b"):
            k = shape[0] // 4
            out[k:2 * k] = 1.0
        return out
    bound = gain / np.sqrt(_fan_in(name, shape))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0,
                dtype=np.float32, names: Sequence[str] | None = None,
                gain: float = INIT_GAIN) -> ParameterSet:
    """Fresh parameters; ``names`` restricts which ones are drawn (others skipped)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = parameter_shapes(cfg)
    arrays, roles = {}, {}
    for name, (shape, role) in shapes.items():
        # draw in fixed order so a name's values do not depend on ``names``
        value = init_tensor(name, shape, rng, dtype, gain)
        if names is None or name in names:
            arrays[name] = value
            roles[name] = role
    return ParameterSet(arrays, roles)


# ------------------------------------------------------------------ encoder


@dataclass
class EncoderStates:
    h: Tensor  # [B, T', 2*d3]
    lengths: np.ndarray  # valid T' per row
    keys: Tensor | None = None  # attention keys W_k h + b, computed once

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.h.shape[1])[None, :] < self.lengths[:, None]

    def select(self, rows: np.ndarray) -> "EncoderStates":
        rows = np.asarray(rows)
        keys = None if self.keys is None else Tensor(self.keys.data[rows])
        return EncoderStates(Tensor(self.h.data[rows]), self.lengths[rows], keys)


def _time_mask(lengths: np.ndarray, t: int, dtype) -> np.ndarray:
    return (np.arange(t)[None, :] < lengths[:, None]).astype(dtype)


def blstm_layer(x: Tensor, lengths: np.ndarray, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Bidirectional LSTM over ``[B, T, D]``; output ``[B, T, 2k]`` (fwd | bwd)."""
    b, t, _ = x.shape
    outs = []
    mask = _time_mask(lengths, t, x.dtype)
    for direction, steps in (("fwd", range(t)), ("bwd", range(t - 1, -1, -1))):
        wx, wh, bias = p[f"{prefix}.{direction}.Wx"], p[f"{prefix}.{direction}.Wh"], p[f"{prefix}.{direction}.b"]
        k = wh.shape[0]
        state = Tensor(np.zeros((b, 2 * k), dtype=x.dtype))
        seq = [None] * t
        for i in steps:
            state = ag.lstm_cell(x[:, i, :], state, wx, wh, bias, mask[:, i])
            seq[i] = state
        outs.append(ag.stack(seq, axis=1)[:, :, :k])
    return ag.concat(outs, axis=-1)


def encode_batch(feats: np.ndarray, lengths: np.ndarray, p: Mapping[str, Tensor],
                 cfg: ModelConfig) -> EncoderStates:
    """Encode a zero-padded ``[B, T, d0]`` batch."""
    if feats.ndim != 3 or feats.shape[2] != cfg.d0:
        raise DimensionError(f"expected features [B, T, {cfg.d0}], got {feats.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    b, t, _ = feats.shape
    dtype = p["enc.dnn1.W"].dtype
    x = Tensor(feats.astype(dtype, copy=False))
    m0 = _time_mask(lengths, t, dtype)[:, :, None]
    h = ag.tanh(ag.affine(x, p["enc.dnn1.W"], p["enc.dnn1.b"])) * m0
    h = ag.tanh(ag.affine(h, p["enc.dnn2.W"], p["enc.dnn2.b"])) * m0
    h = ag.reshape(h, (b, 1, t, cfg.d2))
    for conv in ("conv1", "conv2"):
        h = ag.relu(ag.conv2d(h, p[f"enc.{conv}.K"], p[f"enc.{conv}.b"]))
        lengths = (lengths + 1) // 2
        # zero padded frames so batched and single-utterance results agree
        h = h * _time_mask(lengths, h.shape[2], dtype)[:, None, :, None]
    t2 = h.shape[2]
    h = ag.reshape(ag.transpose(h, (0, 2, 1, 3)), (b, t2, cfg.flatten_dim))
    for layer in range(cfg.encoder_blstm_layers):
        h = blstm_layer(h, lengths, p, f"enc.blstm{layer}")
    keys = ag.add(ag.matmul(h, p["dec.att.Wk"]), p["dec.att.b"])
    return EncoderStates(h, lengths, keys)


def encode(x, p: Mapping[str, Tensor], cfg: ModelConfig) -> EncoderStates:
    """Encode one utterance (``FeatureMatrix`` or ``[T, d0]`` array)."""
    frames = getattr(x, "frames", x)
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != cfg.d0:
        raise DimensionError(f"expected [T, {cfg.d0}] features, got {frames.shape}")
    return encode_batch(frames[None], np.array([frames.shape[0]]), p, cfg)


# ------------------------------------------------------------------ attention + decoder


def attend(query: Tensor, states: EncoderStates, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Additive attention: ``v . tanh(W_q q + W_k h_t + b)``, softmax over valid t.

    ``query`` is ``[B, H]``; returns context ``[B, 2*d3]`` and weights ``[B, T']``.
    """
    if states.keys is None:
        states.keys = ag.add(ag.matmul(states.h, p["dec.att.Wk"]), p["dec.att.b"])
    b, t, a = states.keys.shape
    q = ag.reshape(ag.matmul(query, p["dec.att.Wq"]), (b, 1, a))
    e = ag.tanh(ag.add(states.keys, q))
    scores = ag.reshape(ag.matmul(e, p["dec.att.v"]), (b, t))
    weights = ag.softmax(scores, axis=-1, mask=states.mask)
    ctx = ag.matmul(ag.reshape(weights, (b, 1, t)), states.h)
    return ag.reshape(ctx, (b, states.h.shape[2])), weights


@dataclass
class DecoderState:
    layers: list[Tensor]  # packed [h, c] per LSTM layer, each [B, 2H]
    context: Tensor  # previous attention context [B, 2*d3]
    attention: Tensor | None = field(default=None)

    @classmethod
    def initial(cls, batch: int, cfg: ModelConfig, dtype=np.float32) -> "DecoderState":
        hd = cfg.decoder_hidden
        return cls([Tensor(np.zeros((batch, 2 * hd), dtype=dtype)) for _ in range(cfg.decoder_layers)],
                   Tensor(np.zeros((batch, 2 * cfg.d3), dtype=dtype)))

    def select(self, rows: np.ndarray) -> "DecoderState":
        return DecoderState([Tensor(s.data[rows]) for s in self.layers], Tensor(self.context.data[rows]))


def _decoder_core(emb: Tensor, state: DecoderState, states: EncoderStates,
                  p: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, DecoderState]:
    hd = cfg.decoder_hidden
    new_layers = []
    s = ag.lstm_cell(ag.concat([emb, state.context], axis=-1), state.layers[0],
                     p["dec.lstm0.Wx"], p["dec.lstm0.Wh"], p["dec.lstm0.b"])
    new_layers.append(s)
    h = s[:, :hd]
    ctx, weights = attend(h, states, p)
    for layer in range(1, cfg.decoder_layers):
        s = ag.lstm_cell(ag.concat([h, ctx], axis=-1), state.layers[layer],
                         p[f"dec.lstm{layer}.Wx"], p[f"dec.lstm{layer}.Wh"], p[f"dec.lstm{layer}.b"])
        new_layers.append(s)
        h = s[:, :hd]
    return h, DecoderState(new_layers, ctx, weights)


def output_logits(h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    proj = ag.affine(h, p["dec.proj.W"], p["dec.proj.b"])
    return ag.affine(proj, p["dec.out.W"], p["dec.out.b"])


def decode_step(prev_tokens, state: DecoderState, states: EncoderStates,
                p: Mapping[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, DecoderState]:
    """One decoder step for a batch of previous tokens; returns ``[B, V]`` logits."""
    prev = np.atleast_1d(np.asarray(prev_tokens, dtype=np.int64))
    if prev.min() < 0 or prev.max() >= cfg.vocab_size:
        raise InputError(f"token index out of range for vocabulary of {cfg.vocab_size}")
    emb = ag.embedding(p["dec.embed.W"], prev)
    h, new_state = _decoder_core(emb, state, states, p, cfg)
    return output_logits(h, p), new_state


# ------------------------------------------------------------------ teacher forcing


@dataclass
class Batch:
    utt_ids: list[str]
    feats: np.ndarray  # [B, T, d0] zero padded
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B, L] bos ... eos, PAD padded

    def __len__(self) -> int:
        return len(self.utt_ids)


def collate(utt_ids: Sequence[str], frames: Sequence[np.ndarray],
            token_seqs: Sequence[np.ndarray], dtype=np.float32) -> Batch:
    if not frames:
        raise UsageError("cannot collate an empty batch")
    lengths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    d = frames[0].shape[1]
    feats = np.zeros((len(frames), lengths.max(), d), dtype=dtype)
    for i, f in enumerate(frames):
        feats[i, :f.shape[0]] = f
    lmax = max(len(t) for t in token_seqs)
    targets = np.full((len(token_seqs), lmax), PAD_ID, dtype=np.int64)
    for i, t in enumerate(token_seqs):
        targets[i, :len(t)] = t
    return Batch(list(utt_ids), feats, lengths, targets)


@dataclass
class ForwardResult:
    loss: Tensor
    token_accuracy: float
    num_tokens: int
    num_correct: int


def forward_teacher_forced(batch: Batch, p: Mapping[str, Tensor], cfg: ModelConfig) -> ForwardResult:
    """Mean token cross-entropy over non-pad target positions plus token accuracy."""
    if len(batch) == 0:
        raise UsageError("empty batch")
    states = encode_batch(batch.feats, batch.lengths, p, cfg)
    inputs, outputs = batch.targets[:, :-1], batch.targets[:, 1:]
    b, steps = inputs.shape
    emb_all = ag.embedding(p["dec.embed.W"], inputs)  # [B, L-1, E]
    state = DecoderState.initial(b, cfg, p["enc.dnn1.W"].dtype)
    hs = []
    for i in range(steps):
        h, state = _decoder_core(emb_all[:, i, :], state, states, p, cfg)
        hs.append(h)
    logits = output_logits(ag.stack(hs, axis=1), p)  # [B, L-1, V]
    mask = outputs != PAD_ID
    loss = ag.cross_entropy(logits, outputs, mask)
    pred = logits.data.argmax(axis=-1)
    n_tok = int(mask.sum())
    n_ok = int(((pred == outputs) & mask).sum())
    return ForwardResult(loss, n_ok / n_tok, n_tok, n_ok)
