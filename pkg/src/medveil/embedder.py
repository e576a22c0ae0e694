"""Identity embedders: frozen face-recognition networks producing unit-norm vectors.

Embedders are consumed, never trained. Any object with an ``embed`` method
returning L2-normalized vectors works; ``ToyConvEmbedder`` is the seeded
stand-in used by tests and toy training runs. Real recognizers plug in via
the eval config (see ``medveil.plugins``).
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch
from torch import nn

EMBED_EPS = 1e-8


@runtime_checkable
class IdentityEmbedder(Protocol):
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Map [B,3,H,W] images to [B,D] unit-norm embeddings, differentiably."""
        ...


def normalize_embeddings(e: torch.Tensor) -> torch.Tensor:
    return e / (e.norm(dim=-1, keepdim=True) + EMBED_EPS)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine on re-normalized embeddings, guarded against near-zero norms."""
    return (normalize_embeddings(a) * normalize_embeddings(b)).sum(dim=-1)


class ToyConvEmbedder(nn.Module):
    """Small frozen conv net with unit-norm output.

    Deterministic given the seed; accepts any input size >= 8 px. Differentiable
    with respect to its input, parameters never require grad.
    """

    def __init__(self, seed: int = 0, dim: int = 512, base: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [3, base, base * 2, base * 4]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.3)
                conv.bias.zero_()
            layers += [conv, nn.SiLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1], dim, bias=False)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=gen) * 0.2)
        self.dim = dim
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        h = self.features(images)
        h = h.mean(dim=(2, 3))
        return normalize_embeddings(self.head(h))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed(images)
