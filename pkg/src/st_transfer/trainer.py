"""Frame-budget batching, the epoch loop, checkpoints and checkpoint averaging."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .audio import AugmentPolicy, Utterance, apply_spec_augment
from .exceptions import InputError, ParseError, TrainingAborted, UsageError
from .model import ModelConfig, ParameterSet, collate, forward_teacher_forced
from .optim import Adam, AdamConfig
from .text import CharVocabulary

log = logging.getLogger(__name__)

LabelProvider = Callable[[Utterance, int], str]


def identity_labels(utt: Utterance, epoch: int) -> str:
    """ASR label provider: the utterance's own transcript every epoch."""
    return utt.text


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 10
    seed: int = 0
    max_frames_per_batch: int = 10000
    bucket_size: int = 128
    specaugment: AugmentPolicy | None = None
    optimizer: AdamConfig = AdamConfig()
    keep_last: int = 5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if d.get("specaugment") is not None and not isinstance(d["specaugment"], AugmentPolicy):
            d["specaugment"] = AugmentPolicy(**d["specaugment"])
        if "optimizer" in d and not isinstance(d["optimizer"], AdamConfig):
            d["optimizer"] = AdamConfig(**d["optimizer"])
        return cls(**d)


# ------------------------------------------------------------------ checkpoints

_MAGIC = b"STXCKPT\x00"
_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    params: ParameterSet
    config: ModelConfig
    vocab: CharVocabulary
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def vocab_fingerprint(self) -> str:
        return self.vocab.fingerprint

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "vocab_fingerprint": self.vocab.fingerprint,
            "vocab": list(self.vocab.symbols),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "roles": self.params.roles,
        }
        raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        parts = [_MAGIC, _U32.pack(_VERSION), _U32.pack(len(raw)), raw, _U32.pack(len(self.params))]
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            bname = name.encode("utf-8")
            parts += [_U32.pack(len(bname)), bname, _U32.pack(arr.ndim)]
            parts += [_U32.pack(d) for d in arr.shape]
            data = arr.tobytes()
            parts += [_U64.pack(len(data)), data]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != _MAGIC:
            raise ParseError("not a checkpoint file (bad magic)")
        pos = 8
        (version,) = _U32.unpack_from(buf, pos)
        if version != _VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        (hlen,) = _U32.unpack_from(buf, pos + 4)
        pos += 8
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (ln,) = _U32.unpack_from(buf, pos)
            name = buf[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = _U32.unpack_from(buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            (nbytes,) = _U64.unpack_from(buf, pos)
            pos += 8
            arrays[name] = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
            pos += nbytes
        vocab = CharVocabulary(header["vocab"])
        if vocab.fingerprint != header["vocab_fingerprint"]:
            raise ParseError("vocabulary fingerprint mismatch inside checkpoint")
        return cls(ParameterSet(arrays, header["roles"]), ModelConfig.from_dict(header["config"]),
                   vocab, header["epoch"], header["metrics"])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Element-wise arithmetic mean of every parameter tensor."""
    if not ckpts:
        raise UsageError("nothing to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.config != first.config or c.vocab_fingerprint != first.vocab_fingerprint:
            raise UsageError("checkpoints differ in model config or vocabulary")
        if set(c.params) != set(first.params) or any(
                c.params[k].shape != first.params[k].shape for k in first.params):
            raise UsageError("checkpoints differ in parameter names or shapes")
    arrays = {}
    for name in first.params:
        acc = np.zeros(first.params[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[name]
        arrays[name] = (acc / len(ckpts)).astype(first.params[name].dtype)
    return Checkpoint(ParameterSet(arrays, first.params.roles), first.config, first.vocab,
                      max(c.epoch for c in ckpts), {"averaged_epochs": [c.epoch for c in ckpts]})


# ------------------------------------------------------------------ batching


def make_frame_batches(lengths: Sequence[int], max_frames: int, rng: np.random.Generator,
                       bucket_size: int = 128) -> list[list[int]]:
    """Group sample indices so each batch's padded frame count stays within ``max_frames``.

    Indices are shuffled, cut into buckets, sorted by length inside each bucket
    and packed greedily; the batch order is shuffled again at the end.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size and lengths.max() > max_frames:
        raise InputError(f"sample of {lengths.max()} frames exceeds the batch budget {max_frames}")
    order = rng.permutation(len(lengths))
    if bucket_size > 0:
        chunks = [order[i:i + bucket_size] for i in range(0, len(order), bucket_size)]
        order = np.concatenate([c[np.argsort(lengths[c], kind="stable")] for c in chunks]) if chunks else order
    batches, cur, cur_max = [], [], 0
    for i in order:
        m = max(cur_max, lengths[i])
        if cur and m * (len(cur) + 1) > max_frames:
            batches.append(cur)
            cur, m = [], lengths[i]
        cur.append(int(i))
        cur_max = m
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def _stable_hash(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


# ------------------------------------------------------------------ evaluation


def evaluate_loss(params: ParameterSet, cfg: ModelConfig, vocab: CharVocabulary,
                  dataset: Sequence[Utterance], labels: LabelProvider = identity_labels,
                  epoch: int = 0, batch_size: int = 32) -> tuple[float, float]:
    """Token-weighted teacher-forced loss and accuracy, no augmentation."""
    tensors = {k: ag.Tensor(v) for k, v in params.items()}
    tot_loss, tot_tok, tot_ok = 0.0, 0, 0
    with ag.no_grad():
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            batch = collate([u.utt_id for u in chunk], [u.features.frames for u in chunk],
                            [vocab.encode(labels(u, epoch)) for u in chunk])
            r = forward_teacher_forced(batch, tensors, cfg)
            tot_loss += float(r.loss.data) * r.num_tokens
            tot_tok += r.num_tokens
            tot_ok += r.num_correct
    return tot_loss / tot_tok, tot_ok / tot_tok


# ------------------------------------------------------------------ training


@dataclass
class CurvePoint:
    epoch: int
    loss: float
    token_accuracy: float
    wall_seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[CurvePoint]
    recent: list[Checkpoint]

    def averaged(self, last: int = 5) -> Checkpoint:
        return average_checkpoints(self.recent[-last:])


def write_curve(curve: Sequence[CurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss", "token_accuracy", "wall_seconds"])
        for c in curve:
            w.writerow([c.epoch, repr(c.loss), repr(c.token_accuracy), f"{c.wall_seconds:.3f}"])


def read_curve(path: str | Path) -> list[CurvePoint]:
    with open(path, newline="") as f:
        return [CurvePoint(int(r["epoch"]), float(r["loss"]), float(r["token_accuracy"]),
                           float(r["wall_seconds"])) for r in csv.DictReader(f)]


def train(model_cfg: ModelConfig, params_init: ParameterSet, dataset: Sequence[Utterance],
          cfg: TrainConfig, vocab: CharVocabulary, label_provider: LabelProvider = identity_labels,
          out_dir: str | Path | None = None,
          on_epoch: Callable[[CurvePoint], None] | None = None) -> TrainResult:
    """Teacher-forced training with Adam; one checkpoint per epoch.

    ``label_provider(utt, epoch)`` yields the target text, which lets ST
    stages draw a fresh pseudo-label every epoch.
    """
    if not dataset:
        raise UsageError("empty training set")
    if len(vocab) != model_cfg.vocab_size:
        raise UsageError(f"vocabulary has {len(vocab)} symbols but the model expects {model_cfg.vocab_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = {k: v.astype(np.float32) for k, v in params_init.items()}
    roles = params_init.roles
    opt = Adam(cfg.optimizer)
    lengths = [u.features.num_frames for u in dataset]
    curve: list[CurvePoint] = []
    recent: list[Checkpoint] = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = make_frame_batches(lengths, cfg.max_frames_per_batch, rng, cfg.bucket_size)
        tot_loss, tot_tok, tot_ok = 0.0, 0, 0
        for idx in batches:
            utts = [dataset[i] for i in idx]
            frames = []
            for u in utts:
                f = u.features
                if cfg.specaugment is not None:
                    urng = np.random.default_rng([cfg.seed, epoch, _stable_hash(u.utt_id)])
                    f = apply_spec_augment(f, cfg.specaugment, urng)
                frames.append(f.frames)
            tokens = [vocab.encode(label_provider(u, epoch)) for u in utts]
            batch = collate([u.utt_id for u in utts], frames, tokens)
            tensors = ag.parameters(params)
            res = forward_teacher_forced(batch, tensors, model_cfg)
            loss = float(res.loss.data)
            if not np.isfinite(loss):
                raise TrainingAborted(f"loss became {loss} at epoch {epoch} (batch of {idx[:4]}...)")
            grads = ag.compute_gradients(res.loss, tensors)
            params = opt.step(params, grads)
            tot_loss += loss * res.num_tokens
            tot_tok += res.num_tokens
            tot_ok += res.num_correct
        point = CurvePoint(epoch, tot_loss / tot_tok, tot_ok / tot_tok, time.perf_counter() - t0)
        curve.append(point)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, point.loss, point.token_accuracy,
                 point.wall_seconds)
        ckpt = Checkpoint(ParameterSet(params, roles), model_cfg, vocab, epoch,
                          {"loss": point.loss, "token_accuracy": point.token_accuracy})
        recent.append(ckpt)
        if len(recent) > max(cfg.keep_last, 1):
            dropped = recent.pop(0)
            if out is not None:
                (out / f"checkpoint{dropped.epoch}.ckpt").unlink(missing_ok=True)
        if out is not None:
            ckpt.save(out / f"checkpoint{epoch}.ckpt")
            write_curve(curve, out / "curve.csv")
        if on_epoch is not None:
            on_epoch(point)
    return TrainResult(recent[-1], curve, recent)
