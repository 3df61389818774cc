"""Causal convolutional aggregator and the multi-step contrastive objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ConvEncoder, EncoderConfig
from .quantizer import Codebook, quantize, straight_through, vq_loss_total


class SequenceTooShort(ValueError):
    pass


@dataclass
class AggregatorConfig:
    num_blocks: int = 2
    filters: int = 256
    dropout: float = 0.2

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")

    @property
    def kernels(self) -> list[int]:
        return [b + 2 for b in range(self.num_blocks)]


@dataclass
class CPCConfig:
    horizon: int = 10
    num_negatives: int = 10
    # "quantized": targets are the straight-through zhat fed to the aggregator;
    # "continuous": targets are the encoder outputs z.
    targets: str = "quantized"

    def __post_init__(self):
        if self.horizon < 1 or self.num_negatives < 1:
            raise ValueError("horizon and num_negatives must be >= 1")
        if self.targets not in ("quantized", "continuous"):
            raise ValueError(f"unknown target kind {self.targets!r}")


class CausalBlock(nn.Module):
    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(dim, dim, kernel)
        self.drop = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, F, D); left zero-padding keeps the output causal and length-preserving
        h = F.pad(x.transpose(1, 2), (self.kernel - 1, 0))
        h = self.drop(self.conv(h)).transpose(1, 2)
        return x + torch.relu(self.norm(h))


class Aggregator(nn.Module):
    def __init__(self, in_dim: int, cfg: AggregatorConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Identity() if in_dim == cfg.filters else nn.Linear(in_dim, cfg.filters)
        self.blocks = nn.ModuleList(CausalBlock(cfg.filters, k, cfg.dropout) for k in cfg.kernels)

    def forward(self, zq: torch.Tensor) -> torch.Tensor:
        """(B, F, d) quantized latents -> (B, F, filters) context vectors."""
        h = self.proj(zq)
        for block in self.blocks:
            h = block(h)
        return h


def sample_negatives(true_idx: torch.Tensor, population: int, n: int, generator=None) -> torch.Tensor:
    """Draw n indices per entry uniformly from range(population) minus the entry itself."""
    if population < 2:
        raise SequenceTooShort("need at least two candidate positions to sample negatives")
    r = torch.randint(0, population - 1, (*true_idx.shape, n), generator=generator, device=true_idx.device)
    return r + (r >= true_idx.unsqueeze(-1)).long()


def cpc_loss(
    contexts: torch.Tensor,
    targets: torch.Tensor,
    heads: Sequence[nn.Module],
    num_negatives: int = 10,
    generator: Optional[torch.Generator] = None,
    negatives: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """Mean InfoNCE cross-entropy over every (t, s) with t + s inside the window.

    contexts: (B, F, D); targets: (B, F, Dz); heads[s-1] projects c_t for step s.
    Negatives for each prediction are drawn from all B*F target positions
    except the true one. `negatives[s-1]` may supply the (B, F-s, N) indices.
    """
    B, Fr, _ = contexts.shape
    if Fr <= 1:
        raise SequenceTooShort(f"need > 1 frame for future prediction, got {Fr}")
    flat = targets.reshape(B * Fr, -1)
    pos_index = torch.arange(B * Fr, device=targets.device).view(B, Fr)
    total, count = contexts.new_zeros(()), 0
    for s in range(1, min(len(heads), Fr - 1) + 1):
        pred = heads[s - 1](contexts[:, : Fr - s])  # (B, F-s, Dz)
        pos = targets[:, s:]
        if negatives is None:
            neg_idx = sample_negatives(pos_index[:, s:], B * Fr, num_negatives, generator)
        else:
            neg_idx = negatives[s - 1]
        cand = F.embedding(neg_idx.reshape(-1, neg_idx.shape[-1]), flat)  # (P, N, Dz)
        p = pred.reshape(-1, pred.shape[-1])
        neg_scores = torch.bmm(cand, p.unsqueeze(-1)).squeeze(-1)
        logits = torch.cat([(p * pos.reshape(p.shape)).sum(-1, keepdim=True), neg_scores], dim=-1)
        labels = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
        total = total + F.cross_entropy(logits, labels, reduction="sum")
        count += labels.numel()
    return total / count


class PreQuantNorm(nn.Module):
    """Grouped 1x1 projection + group norm applied to encoder outputs before lookup.

    Centres and scales each group so a codebook initialised near the origin
    partitions the latents instead of collapsing onto one entry.
    """

    def __init__(self, dim: int, groups: int):
        super().__init__()
        self.proj = nn.Conv1d(dim, dim, 1, groups=groups, bias=False)
        self.norm = nn.GroupNorm(groups, dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(z.transpose(1, 2))).transpose(1, 2)


class VQCPC(nn.Module):
    """Encoder -> grouped quantizer -> causal aggregator, with per-step heads."""

    def __init__(
        self,
        enc_cfg: EncoderConfig = None,
        agg_cfg: AggregatorConfig = None,
        cpc_cfg: CPCConfig = None,
        groups: int = 2,
        vars: int = 100,
        gamma: float = 0.25,
        codebook_init_scale: float = 0.1,
        pre_quant_norm: bool = False,
    ):
        super().__init__()
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.agg_cfg = agg_cfg or AggregatorConfig(filters=self.enc_cfg.out_dim)
        self.cpc_cfg = cpc_cfg or CPCConfig()
        d = self.enc_cfg.out_dim
        self.encoder = ConvEncoder(self.enc_cfg)
        self.pre_quant = PreQuantNorm(d, groups) if pre_quant_norm else nn.Identity()
        self.codebook = Codebook(d, groups, vars, gamma, codebook_init_scale)
        self.aggregator = Aggregator(d, self.agg_cfg)
        self.heads = nn.ModuleList(nn.Linear(self.agg_cfg.filters, d) for _ in range(self.cpc_cfg.horizon))
        # zero heads give uniform scores at init, i.e. a loss of ln(1 + negatives)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def latents(self, x: torch.Tensor) -> torch.Tensor:
        """z-vectors fed to the quantizer, (B, F, d)."""
        return self.pre_quant(self.encoder(x))

    def forward(self, x: torch.Tensor, generator=None, negatives=None, detach_cpc: bool = False) -> dict:
        return pretrain_loss(self, x, generator=generator, negatives=negatives, detach_cpc=detach_cpc)


def pretrain_loss(model: VQCPC, x: torch.Tensor, generator=None, negatives=None, detach_cpc: bool = False) -> dict:
    """Total objective = CPC + codebook term + gamma * commitment term."""
    z = model.latents(x)
    q = quantize(z, model.codebook)
    zq = straight_through(z, q.zhat)
    c = model.aggregator(zq)
    targets = zq if model.cpc_cfg.targets == "quantized" else z
    cpc = cpc_loss(c, targets, model.heads, model.cpc_cfg.num_negatives, generator, negatives)
    vq = vq_loss_total(q, model.codebook)
    total = (cpc.detach() if detach_cpc else cpc) + vq
    return {
        "total": total,
        "cpc": cpc,
        "vq": vq,
        "codebook_term": q.codebook_term,
        "commitment_term": q.commitment_term,
        "indices": q.indices,
    }
