"""Projection adapters producing the three conditioning token sequences."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import UsageError

NULL_PROMPT = ""
# Word-level vocabulary; index 0 is the reserved null token used for CFG.
WORDS = ("<null>", "a", "person", "portrait", "<pad>")
PROMPTS = (NULL_PROMPT, "a person", "portrait")
TEXT_TOKENS = 4


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    token_ids: tuple

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        if text not in PROMPTS:
            raise UsageError(f"unknown prompt {text!r}; vocabulary is {list(PROMPTS)}")
        if text == NULL_PROMPT:
            return cls(text, (0,) * TEXT_TOKENS)
        ids = [WORDS.index(w) for w in text.split()]
        ids += [WORDS.index("<pad>")] * (TEXT_TOKENS - len(ids))
        return cls(text, tuple(ids))


def prompt_ids(prompts) -> torch.Tensor:
    return torch.tensor([PromptTemplate.from_text(p).token_ids for p in prompts], dtype=torch.long)


class TextEncoder(nn.Module):
    """Learned lookup standing in for a frozen language model."""

    def __init__(self, ctx_dim: int):
        super().__init__()
        self.token = nn.Embedding(len(WORDS), ctx_dim)
        self.position = nn.Parameter(torch.randn(TEXT_TOKENS, ctx_dim) * 0.02)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token(token_ids) + self.position


class IdentityProjector(nn.Module):
    """Bias-free linear map from a face embedding to ``n_tokens`` context tokens."""

    def __init__(self, embed_dim: int, ctx_dim: int, n_tokens: int = 4):
        super().__init__()
        self.n_tokens, self.ctx_dim = n_tokens, ctx_dim
        self.proj = nn.Linear(embed_dim, n_tokens * ctx_dim, bias=False)

    def forward(self, face_embedding: torch.Tensor) -> torch.Tensor:
        return self.proj(face_embedding).reshape(-1, self.n_tokens, self.ctx_dim)

    def operator_norm(self) -> float:
        return float(torch.linalg.matrix_norm(self.proj.weight.detach().double(), ord=2))


class AttrProjector(nn.Module):
    """One affine map per W+ layer, giving one attribute token per layer."""

    def __init__(self, n_layers: int, d_latent: int, ctx_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_layers, ctx_dim, d_latent) / d_latent ** 0.5)
        self.bias = nn.Parameter(torch.zeros(n_layers, ctx_dim))

    def project_delta(self, delta: torch.Tensor) -> torch.Tensor:
        return torch.einsum("lcd,bld->blc", self.weight, delta)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return self.project_delta(w) + self.bias


def encode_text(encoder: TextEncoder, template: PromptTemplate) -> torch.Tensor:
    return encoder(torch.tensor([template.token_ids]))[0]


def project_identity(projector: IdentityProjector, f: torch.Tensor) -> torch.Tensor:
    return projector(f.reshape(1, -1))[0]


def project_attributes(projector: AttrProjector, w: torch.Tensor) -> torch.Tensor:
    return projector(w.unsqueeze(0))[0]
