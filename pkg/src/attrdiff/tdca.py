"""Triplet-decoupled cross-attention and the concatenation baseline.

A single query projection is shared by every branch; text, identity and
attribute contexts each get their own key/value projections. The triplet
block sums the three attention outputs with gains ``lambda1`` (identity) and
``lambda2`` (attribute), then applies one shared output projection and a
residual connection.

The concatenation baseline instead runs one extra branch over
``[id_tokens; attr_tokens]`` through a shared key/value projection, so the
attribute tokens compete with identity tokens inside the same softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError

TRIPLET = "triplet"
CONCAT = "concat"


def attend(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, return_probs: bool = False):
    """Scaled dot-product attention over the last two dimensions.

    ``queries`` is ``(..., Nq, D)``, ``keys`` ``(..., Nk, D)`` and ``values``
    ``(..., Nk, Dv)``; leading dimensions broadcast.
    """
    if keys.shape[-2] != values.shape[-2]:
        raise ConfigurationError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    if queries.shape[-1] != keys.shape[-1]:
        raise ConfigurationError(f"query dim {queries.shape[-1]} != key dim {keys.shape[-1]}")
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    probs = scores.softmax(dim=-1)
    out = probs @ values
    return (out, probs) if return_probs else out


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def multihead_attend(q, k, v, heads: int, return_probs: bool = False):
    res = attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), return_probs)
    if return_probs:
        return merge_heads(res[0]), res[1]
    return merge_heads(res)


@dataclass
class ConditioningBundle:
    """Three token sequences, each ``(batch, length, ctx_dim)``."""

    text_tokens: torch.Tensor
    id_tokens: torch.Tensor
    attr_tokens: torch.Tensor

    def __post_init__(self):
        dims = {t.shape[-1] for t in (self.text_tokens, self.id_tokens, self.attr_tokens)}
        if len(dims) != 1:
            raise ConfigurationError(f"token dims disagree: {sorted(dims)}")
        for name in ("text_tokens", "id_tokens", "attr_tokens"):
            if getattr(self, name).shape[-2] < 1:
                raise ConfigurationError(f"{name} must hold at least one token")

    @property
    def ctx_dim(self) -> int:
        return self.text_tokens.shape[-1]

    def index(self, idx) -> "ConditioningBundle":
        return ConditioningBundle(self.text_tokens[idx], self.id_tokens[idx], self.attr_tokens[idx])

    def repeat_interleave(self, n: int) -> "ConditioningBundle":
        return ConditioningBundle(*(t.repeat_interleave(n, 0) for t in self.tensors()))

    def tensors(self):
        return (self.text_tokens, self.id_tokens, self.attr_tokens)

    @staticmethod
    def cat(bundles) -> "ConditioningBundle":
        return ConditioningBundle(*(torch.cat(ts, 0) for ts in zip(*(b.tensors() for b in bundles))))


class TDCABlock(nn.Module):
    """Cross-attention block over text, identity and attribute tokens."""

    def __init__(self, dim: int, ctx_dim: int, heads: int = 4, topology: str = TRIPLET):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.ctx_dim, self.heads = dim, ctx_dim, heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k_text = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v_text = nn.Linear(ctx_dim, dim, bias=False)
        self.to_k_id = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v_id = nn.Linear(ctx_dim, dim, bias=False)
        self.to_k_attr = nn.Linear(ctx_dim, dim, bias=False)
        self.to_v_attr = nn.Linear(ctx_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.topology = TRIPLET
        if topology == CONCAT:
            self.convert_to_concat()
        elif topology != TRIPLET:
            raise ConfigurationError(f"unknown topology {topology!r}")

    def reset_attribute_branch(self, generator: torch.Generator | None = None) -> None:
        """Fresh attribute K/V; V starts at zero so the branch is initially a no-op."""
        bound = 1.0 / math.sqrt(self.ctx_dim)
        with torch.no_grad():
            self.to_k_attr.weight.uniform_(-bound, bound, generator=generator)
            self.to_v_attr.weight.zero_()

    def convert_to_concat(self) -> None:
        """Swap the separate attribute branch for one shared projection over ``[id; attr]``.

        The shared projection starts from the identity branch weights.
        """
        if self.topology == CONCAT:
            return
        self.to_k_cat = nn.Linear(self.ctx_dim, self.dim, bias=False)
        self.to_v_cat = nn.Linear(self.ctx_dim, self.dim, bias=False)
        with torch.no_grad():
            self.to_k_cat.weight.copy_(self.to_k_id.weight)
            self.to_v_cat.weight.copy_(self.to_v_id.weight)
        del self.to_k_attr, self.to_v_attr
        self.topology = CONCAT

    def query(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_q(self.norm(x))

    def _branch(self, q, tokens, to_k, to_v):
        return multihead_attend(q, to_k(tokens), to_v(tokens), self.heads)

    def text_branch(self, q, bundle):
        return self._branch(q, bundle.text_tokens, self.to_k_text, self.to_v_text)

    def id_branch(self, q, bundle):
        return self._branch(q, bundle.id_tokens, self.to_k_id, self.to_v_id)

    def attr_branch(self, q, bundle):
        return self._branch(q, bundle.attr_tokens, self.to_k_attr, self.to_v_attr)

    def concat_branch(self, q, bundle):
        tokens = torch.cat([bundle.id_tokens, bundle.attr_tokens], dim=-2)
        if self.topology == CONCAT:
            to_k, to_v = self.to_k_cat, self.to_v_cat
        else:
            to_k, to_v = self.to_k_id, self.to_v_id
        return self._branch(q, tokens, to_k, to_v)

    def forward(self, x: torch.Tensor, bundle: ConditioningBundle, lambda1: float = 1.0, lambda2: float = 1.0):
        """``x`` is a token sequence ``(batch, n, dim)``."""
        if self.topology == CONCAT:
            return concat_decoupled_forward(x, bundle, self, lambda1)
        return tdca_forward(x, bundle, self, lambda1, lambda2)


def tdca_forward(x, bundle: ConditioningBundle, block: TDCABlock, lambda1: float = 1.0, lambda2: float = 1.0):
    """``x + out(A(Q,K_t,V_t) + lambda1 A(Q,K_i,V_i) + lambda2 A(Q,K_j,V_j))``."""
    if bundle.ctx_dim != block.ctx_dim:
        raise ConfigurationError(f"bundle ctx dim {bundle.ctx_dim} != block ctx dim {block.ctx_dim}")
    q = block.query(x)
    z = block.text_branch(q, bundle)
    if lambda1 != 0:
        z = z + lambda1 * block.id_branch(q, bundle)
    if lambda2 != 0:
        z = z + lambda2 * block.attr_branch(q, bundle)
    return x + block.to_out(z)


def concat_decoupled_forward(x, bundle: ConditioningBundle, block: TDCABlock, lam: float = 1.0):
    """``x + out(A(Q,K_t,V_t) + lam A(Q,K_c,V_c))`` with ``[id; attr]`` as one context."""
    if bundle.ctx_dim != block.ctx_dim:
        raise ConfigurationError(f"bundle ctx dim {bundle.ctx_dim} != block ctx dim {block.ctx_dim}")
    q = block.query(x)
    z = block.text_branch(q, bundle)
    if lam != 0:
        z = z + lam * block.concat_branch(q, bundle)
    return x + block.to_out(z)
