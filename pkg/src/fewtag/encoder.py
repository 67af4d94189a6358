"""Trainable token encoder: embeddings plus a small self-attention stack.

Stands in for a large pretrained encoder at desk scale; the contract is
just ids -> per-position hidden states, so alternatives can be swapped in
behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompt import InputSequence
from .rngutil import make_rng

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: Optional[int] = None  # defaults to 2*d
    dropout: float = 0.1
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"hidden dim {self.d} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def ff(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 2 * self.d

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


def init_encoder_params(config: EncoderConfig) -> dict[str, Tensor]:
    """Scaled-uniform matrices, zero biases, unit norm gains; seeded."""
    rng = make_rng(config.seed, "encoder_init")
    d, ff = config.d, config.ff
    params: dict[str, Tensor] = {}

    def matrix(name, rows, cols):
        bound = 1.0 / np.sqrt(rows)
        params[name] = Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                              requires_grad=True)

    def bias(name, n):
        params[name] = Tensor(np.zeros(n), requires_grad=True)

    def norm(prefix):
        params[f"{prefix}.norm_gain"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.norm_bias"] = Tensor(np.zeros(d), requires_grad=True)

    matrix("emb.token", config.vocab_size, d)
    matrix("emb.pos", config.max_len, d)
    norm("emb")
    for i in range(config.n_layers):
        p = f"layer{i}"
        for h in range(config.n_heads):
            for kind in ("q", "k", "v"):
                matrix(f"{p}.attn.{kind}{h}.w", d, config.head_dim)
                bias(f"{p}.attn.{kind}{h}.bias", config.head_dim)
        matrix(f"{p}.attn.out.w", d, d)
        bias(f"{p}.attn.out.bias", d)
        norm(f"{p}.attn")
        matrix(f"{p}.ff.w1", d, ff)
        bias(f"{p}.ff.bias1", ff)
        matrix(f"{p}.ff.w2", ff, d)
        bias(f"{p}.ff.bias2", d)
        norm(f"{p}.ff")
    return params


def _apply_norm(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    y = ad.layer_norm(x)
    return ad.add(ad.mul(y, params[f"{prefix}.norm_gain"]), params[f"{prefix}.norm_bias"])


def encode(params: dict[str, Tensor], config: EncoderConfig, seq: InputSequence,
           train_mode: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Hidden states for every position, shape (max_len, d).

    Padding key positions are masked out of attention, so padding ids never
    influence valid positions.  Dropout is active only in train mode and
    draws from `rng`.
    """
    ids = seq.token_ids
    if ids.max() >= config.vocab_size or ids.min() < 0:
        raise ValueError(f"token id out of range for vocab size {config.vocab_size}")
    if train_mode and config.dropout > 0 and rng is None:
        raise ValueError("train-mode encoding needs a dropout rng")

    def drop(x: Tensor) -> Tensor:
        return ad.dropout(x, config.dropout, rng, train=train_mode)

    L = seq.max_len
    key_bias = np.where(np.arange(L) < seq.n_occupied, 0.0, ATTN_MASK_VALUE)
    inv_sqrt_dh = 1.0 / np.sqrt(config.head_dim)

    x = ad.add(ad.row_gather(params["emb.token"], ids),
               ad.row_gather(params["emb.pos"], np.arange(L)))
    x = drop(_apply_norm(params, "emb", x))

    for i in range(config.n_layers):
        p = f"layer{i}"
        heads = []
        for h in range(config.n_heads):
            q = ad.add(ad.matmul(x, params[f"{p}.attn.q{h}.w"]), params[f"{p}.attn.q{h}.bias"])
            k = ad.add(ad.matmul(x, params[f"{p}.attn.k{h}.w"]), params[f"{p}.attn.k{h}.bias"])
            v = ad.add(ad.matmul(x, params[f"{p}.attn.v{h}.w"]), params[f"{p}.attn.v{h}.bias"])
            scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dh),
                            Tensor(key_bias))
            heads.append(ad.matmul(ad.row_softmax(scores), v))
        attn = ad.add(ad.matmul(concat_cols(heads), params[f"{p}.attn.out.w"]),
                      params[f"{p}.attn.out.bias"])
        x = _apply_norm(params, f"{p}.attn", ad.add(x, drop(attn)))

        hid = ad.softplus(ad.add(ad.matmul(x, params[f"{p}.ff.w1"]), params[f"{p}.ff.bias1"]))
        ffn = ad.add(ad.matmul(hid, params[f"{p}.ff.w2"]), params[f"{p}.ff.bias2"])
        x = _apply_norm(params, f"{p}.ff", ad.add(x, drop(ffn)))
    return x


def concat_cols(parts: list[Tensor]) -> Tensor:
    return ad.concat(parts, axis=1)
