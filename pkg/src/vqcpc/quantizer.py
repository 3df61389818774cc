"""Grouped K-means vector quantization with straight-through gradients.

Each latent frame of size d is split into G partitions of size d/G; each
partition is replaced by its nearest entry in that group's codebook of V
vectors. The composite symbol is the G-tuple of selected indices.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class DimensionMismatch(ValueError):
    pass


@dataclass
class QuantizedSequence:
    zhat: torch.Tensor  # (..., F, d), forward value = selected codewords
    indices: torch.Tensor  # (..., F, G) int64
    codebook_term: torch.Tensor  # mean ||sg(z) - zhat||^2
    commitment_term: torch.Tensor  # mean ||z - sg(zhat)||^2


class Codebook(nn.Module):
    def __init__(self, dim: int, groups: int = 2, vars: int = 100, gamma: float = 0.25, init_scale: float = 0.1):
        super().__init__()
        if dim % groups:
            raise DimensionMismatch(f"latent dim {dim} not divisible by {groups} groups")
        if vars < 2:
            raise ValueError("need at least 2 codebook vectors per group")
        self.dim, self.groups, self.vars, self.gamma = dim, groups, vars, gamma
        self.entries = nn.Parameter(init_scale * torch.randn(groups, vars, dim // groups))

    @property
    def group_dim(self) -> int:
        return self.dim // self.groups

    def extra_repr(self) -> str:
        return f"dim={self.dim}, groups={self.groups}, vars={self.vars}, gamma={self.gamma}"

    def forward(self, z: torch.Tensor) -> QuantizedSequence:
        return quantize(z, self)

    @torch.no_grad()
    def init_from_latents(self, z: torch.Tensor, seed: int = 0) -> None:
        """k-means++ seeding of each group's entries from observed latents."""
        from .sax import kmeans_pp_init

        zg = z.detach().reshape(-1, self.groups, self.group_dim).double().cpu().numpy()
        rng = np.random.default_rng(seed)
        for g in range(self.groups):
            seeds = kmeans_pp_init(zg[:, g], self.vars, rng)
            self.entries[g].copy_(torch.from_numpy(seeds).to(self.entries.dtype))


def nearest_indices(z: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Per-group argmin of squared distance; ties go to the smallest index.

    z: (N, G, d/G), entries: (G, V, d/G) -> (N, G).
    """
    zt = z.transpose(0, 1)  # (G, N, d/G)
    dist = (
        zt.pow(2).sum(-1, keepdim=True)
        - 2.0 * torch.bmm(zt, entries.transpose(1, 2))
        + entries.pow(2).sum(-1).unsqueeze(1)
    )  # (G, N, V)
    # torch.argmin returns the first minimal index
    return dist.argmin(dim=-1).transpose(0, 1)


def quantize(z: torch.Tensor, cb: Codebook) -> QuantizedSequence:
    if z.shape[-1] != cb.dim:
        raise DimensionMismatch(f"frame dim {z.shape[-1]} != codebook dim {cb.dim}")
    lead = z.shape[:-1]
    zg = z.reshape(-1, cb.groups, cb.group_dim)
    with torch.no_grad():
        idx = nearest_indices(zg.detach(), cb.entries.detach())
    g = torch.arange(cb.groups, device=z.device).expand_as(idx)
    q = cb.entries[g, idx]  # (N, G, d/G), differentiable w.r.t. entries
    n = zg.shape[0]
    codebook_term = (zg.detach() - q).pow(2).sum((-1, -2)).sum() / max(n, 1)
    commitment_term = (zg - q.detach()).pow(2).sum((-1, -2)).sum() / max(n, 1)
    return QuantizedSequence(q.reshape(*lead, cb.dim), idx.reshape(*lead, cb.groups), codebook_term, commitment_term)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, zhat):
        return zhat.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z: torch.Tensor, zhat: torch.Tensor) -> torch.Tensor:
    """Forward value zhat; the incoming gradient goes to z unchanged, none to zhat."""
    if z.shape != zhat.shape:
        raise DimensionMismatch(f"{tuple(z.shape)} vs {tuple(zhat.shape)}")
    return _StraightThrough.apply(z, zhat)


def vq_loss_total(q: QuantizedSequence, cb: Codebook) -> torch.Tensor:
    return q.codebook_term + cb.gamma * q.commitment_term


def composite_codewords(indices) -> list[tuple]:
    """Flatten (..., G) index arrays into a list of G-tuples."""
    arr = np.asarray(indices.cpu() if torch.is_tensor(indices) else indices)
    return [tuple(int(v) for v in row) for row in arr.reshape(-1, arr.shape[-1])]


def usage_stats(indices) -> dict:
    """Distinct composite codewords, entropy (bits), histogram over a corpus.

    `indices` is an array (..., G) or an iterable of such arrays.
    """
    if isinstance(indices, (list, tuple)) and len(indices) and not np.isscalar(indices[0]):
        words = [w for item in indices for w in composite_codewords(item)]
    else:
        words = composite_codewords(indices)
    if not words:
        raise ValueError("empty corpus")
    hist = Counter(words)
    total = sum(hist.values())
    entropy = -sum((c / total) * math.log2(c / total) for c in hist.values())
    return {"distinct_codewords": len(hist), "entropy": entropy + 0.0, "histogram": dict(hist)}


def write_usage_csv(stats: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["codeword", "count"])
        for word, count in sorted(stats["histogram"].items(), key=lambda kv: (-kv[1], kv[0])):
            w.writerow(["-".join(map(str, word)), count])
