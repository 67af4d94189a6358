"""Optimizer, source-domain training, target fine-tuning, and checkpoints.

Fine-tuning gathers the whole support set into one batch and repeats
gradient steps until the loss rises above the previous iteration's value
(early stopping against overfitting), backstopped by an iteration cap.
In 1-shot mode the context-context loss is dropped and distances switch to
squared Euclidean on the mu projections.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import DataError, LabelMap, LabelSet, Sentence, Vocabulary, build_vocab
from .encoder import EncoderConfig, encode, init_encoder_params
from .gaussian import init_projection_params
from .losses import LossConfig, build_batch_view, mixed_loss
from .prompt import assemble_input, build_label_prompt
from .rngutil import make_rng


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


SHOT_MODE_K = "k-shot"
SHOT_MODE_1 = "1-shot"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 1
    max_len: int = 128
    embed_dim: int = 128                     # Gaussian embedding dim l
    alpha: float = 0.5
    alpha_grid: tuple[float, ...] = (0.8, 0.5, 0.3)
    tau: float = 1.0
    loss_variant: str = "icl"
    metric: str = "symkl"
    o_keep_fraction: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    shot_mode: str = SHOT_MODE_K
    max_finetune_iters: int = 200
    keep_best: bool = False
    use_context_context: bool = True
    use_context_label: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "max_len", "embed_dim", "tau",
                     "max_finetune_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.shot_mode not in (SHOT_MODE_K, SHOT_MODE_1):
            raise ValueError(f"unknown shot_mode {self.shot_mode!r}")

    def loss_config(self) -> LossConfig:
        if self.shot_mode == SHOT_MODE_1:
            # context-label only, squared Euclidean, full weight on the label loss
            return LossConfig(alpha=0.0, tau=self.tau, loss_variant=self.loss_variant,
                              metric="sqeuclid", use_context_context=False,
                              use_context_label=True,
                              o_keep_fraction=self.o_keep_fraction)
        return LossConfig(alpha=self.alpha, tau=self.tau, loss_variant=self.loss_variant,
                          metric=self.metric,
                          use_context_context=self.use_context_context,
                          use_context_label=self.use_context_label,
                          o_keep_fraction=self.o_keep_fraction)


# -- optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # name substrings excluded from decay (norm layers and biases)
    decay_exclude: tuple[str, ...] = ("norm", "bias")
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def excluded(self, name: str) -> bool:
        return any(pat in name for pat in self.decay_exclude)


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Decoupled-decay update in place; decay skips excluded parameters."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay and not state.excluded(name):
            update = update + state.lr * state.weight_decay * p.data
        p.data = p.data - update


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"FEWTAG\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    params: dict[str, Tensor]
    vocab: Vocabulary
    label_map: LabelMap
    label_set: LabelSet
    embed_dim: int
    version: int = CHECKPOINT_VERSION

    def clone(self) -> "Checkpoint":
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in self.params.items()}
        return Checkpoint(encoder_config=self.encoder_config, params=params,
                          vocab=self.vocab, label_map=self.label_map,
                          label_set=self.label_set, embed_dim=self.embed_dim,
                          version=self.version)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Versioned binary container: magic, metadata JSON, named f64 tensors."""
    meta = {
        "version": ckpt.version,
        "encoder_config": asdict(ckpt.encoder_config),
        "vocab": ckpt.vocab.token_to_id,
        "label_map": ckpt.label_map.phrases,
        "label_set": {"classes": list(ckpt.label_set.classes), "role": ckpt.label_set.role},
        "embed_dim": ckpt.embed_dim,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            data = np.ascontiguousarray(ckpt.params[name].data, dtype="<f8")
            name_b = name.encode()
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise CheckpointError(f"{path}: truncated checkpoint file")
            out = blob[off:off + n]
            off += n
            return out

        if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
        (version,) = struct.unpack("<I", take(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", take(8))
        meta = json.loads(take(meta_len))
        (n_tensors,) = struct.unpack("<I", take(4))
        params: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode()
            (rank,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
            params[name] = Tensor(data, requires_grad=True)
    except struct.error as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    enc_cfg = EncoderConfig(**meta["encoder_config"])
    return Checkpoint(encoder_config=enc_cfg, params=params,
                      vocab=Vocabulary(meta["vocab"]),
                      label_map=LabelMap(meta["label_map"]),
                      label_set=LabelSet(tuple(meta["label_set"]["classes"]),
                                         role=meta["label_set"]["role"]),
                      embed_dim=meta["embed_dim"], version=version)


# -- training loops ----------------------------------------------------------


@dataclass
class LogEntry:
    step: int
    loss: float
    context_context: Optional[float]
    context_label: Optional[float]

    def format(self) -> str:
        cc = "-" if self.context_context is None else f"{self.context_context:.6f}"
        cl = "-" if self.context_label is None else f"{self.context_label:.6f}"
        return f"step={self.step} loss={self.loss:.6f} cc={cc} cl={cl}"


def _batch_loss(ckpt: Checkpoint, sentences: list[Sentence], prompt, loss_config,
                train_mode: bool, dropout_rng, subsample_rng,
                max_len: int):
    seqs = [assemble_input(s, prompt, ckpt.vocab, max_len=max_len) for s in sentences]
    hiddens = [encode(ckpt.params, ckpt.encoder_config, s, train_mode=train_mode,
                      rng=dropout_rng) for s in seqs]
    batch = build_batch_view(hiddens, seqs, ckpt.params,
                             o_keep_fraction=loss_config.o_keep_fraction,
                             rng=subsample_rng)
    return mixed_loss(batch, loss_config)


def train_source(sentences: list[Sentence], label_set: LabelSet, label_map: LabelMap,
                 config: TrainConfig, encoder_overrides: Optional[dict] = None,
                 extra_vocab_words: Optional[list[str]] = None
                 ) -> tuple[Checkpoint, list[LogEntry]]:
    """One (by default) epoch of shuffled mini-batch training on the source domain.

    `extra_vocab_words` lets callers reserve vocabulary rows for words that
    only appear later (e.g. target-domain label phrases).
    """
    if not sentences:
        raise DataError("source dataset is empty")
    label_map.check_covers(label_set)

    vocab = build_vocab(sentences, label_map=label_map)
    if extra_vocab_words:
        token_to_id = dict(vocab.token_to_id)
        for w in extra_vocab_words:
            if w not in token_to_id:
                token_to_id[w] = len(token_to_id)
        vocab = Vocabulary(token_to_id)

    encoder_config = EncoderConfig(vocab_size=vocab.size, max_len=config.max_len,
                                   seed=config.seed, **(encoder_overrides or {}))
    params = init_encoder_params(encoder_config)
    params.update(init_projection_params(d=encoder_config.d, l=config.embed_dim,
                                         seed=config.seed))
    ckpt = Checkpoint(encoder_config=encoder_config, params=params, vocab=vocab,
                      label_map=label_map, label_set=label_set,
                      embed_dim=config.embed_dim)

    prompt = build_label_prompt(label_set, label_map)
    loss_config = config.loss_config()
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = make_rng(config.seed, "batch_shuffle")
    dropout_rng = make_rng(config.seed, "dropout")
    subsample_rng = make_rng(config.seed, "o_subsample")

    log: list[LogEntry] = []
    step = 0
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(sentences))
        for lo in range(0, len(order), config.batch_size):
            batch_sents = [sentences[i] for i in order[lo:lo + config.batch_size]]
            out = _batch_loss(ckpt, batch_sents, prompt, loss_config,
                              train_mode=True, dropout_rng=dropout_rng,
                              subsample_rng=subsample_rng, max_len=config.max_len)
            loss = out.item()
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at step {step}: {loss}")
            for p in ckpt.params.values():
                p.zero_grad()
            out.total.backward(leaves=list(ckpt.params.values()))
            adamw_step(ckpt.params, opt)
            log.append(LogEntry(
                step=step, loss=loss,
                context_context=None if out.context_context is None
                else out.context_context.value.item(),
                context_label=None if out.context_label is None
                else out.context_label.value.item()))
            step += 1
    return ckpt, log


@dataclass
class FinetuneResult:
    loss_trace: list[float]
    iterations: int
    hit_cap: bool
    used_context_context: bool
    metric: str
    log: list[LogEntry]


def retarget(checkpoint: Checkpoint, label_set: LabelSet,
             label_map: LabelMap) -> Checkpoint:
    """Clone a checkpoint onto a new label set without changing parameters."""
    label_map.check_covers(label_set)
    ckpt = checkpoint.clone()
    return Checkpoint(encoder_config=ckpt.encoder_config, params=ckpt.params,
                      vocab=ckpt.vocab, label_map=label_map,
                      label_set=label_set, embed_dim=ckpt.embed_dim)


def finetune(checkpoint: Checkpoint, support: list[Sentence],
             target_label_set: LabelSet, target_label_map: LabelMap,
             config: TrainConfig) -> tuple[Checkpoint, FinetuneResult]:
    """Adapt a source checkpoint to a target label set on one support batch.

    The loop runs whole-support gradient steps and stops as soon as the loss
    exceeds the previous iteration's value, or at the iteration cap.  As
    written the post-increase parameters are returned; `keep_best` returns
    the snapshot from just before the triggering update instead.
    """
    if not support:
        raise DataError("support set is empty")
    ckpt = retarget(checkpoint, target_label_set, target_label_map)
    prompt = build_label_prompt(target_label_set, target_label_map)
    loss_config = config.loss_config()
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    dropout_rng = make_rng(config.seed, "finetune_dropout")
    subsample_rng = make_rng(config.seed, "finetune_o_subsample")

    loss_prev = math.inf
    loss = loss_prev - 1  # vacuous first comparison, by construction
    trace: list[float] = []
    log: list[LogEntry] = []
    best: Optional[dict[str, np.ndarray]] = None
    best_loss = math.inf
    iters = 0
    hit_cap = False
    while True:
        loss_prev = loss
        out = _batch_loss(ckpt, support, prompt, loss_config, train_mode=True,
                          dropout_rng=dropout_rng, subsample_rng=subsample_rng,
                          max_len=config.max_len)
        loss = out.item()
        if not math.isfinite(loss):
            raise NumericError(f"non-finite fine-tuning loss at iteration {iters}")
        if config.keep_best and loss < best_loss:
            best_loss = loss
            best = {k: p.data.copy() for k, p in ckpt.params.items()}
        for p in ckpt.params.values():
            p.zero_grad()
        out.total.backward(leaves=list(ckpt.params.values()))
        adamw_step(ckpt.params, opt)
        trace.append(loss)
        log.append(LogEntry(
            step=iters, loss=loss,
            context_context=None if out.context_context is None
            else out.context_context.value.item(),
            context_label=None if out.context_label is None
            else out.context_label.value.item()))
        iters += 1
        if loss > loss_prev:
            break
        if iters >= config.max_finetune_iters:
            hit_cap = True
            break
    if config.keep_best and best is not None:
        for k, p in ckpt.params.items():
            p.data = best[k]
    return ckpt, FinetuneResult(loss_trace=trace, iterations=iters, hit_cap=hit_cap,
                                used_context_context=loss_config.use_context_context,
                                metric=loss_config.metric, log=log)
