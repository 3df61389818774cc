"""Strided 1-D convolutional encoder mapping sensor windows to z-vectors."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

BASE_RATE_HZ = 50.0


class WindowTooShort(ValueError):
    pass


@dataclass
class EncoderConfig:
    channels: tuple = (32, 64, 128, 256)
    kernels: tuple = (4, 1, 1, 1)
    strides: tuple = (2, 1, 1, 1)
    dropout: float = 0.2
    in_channels: int = 3
    variant: str = "base_24.5Hz"

    def __post_init__(self):
        self.channels, self.kernels, self.strides = map(tuple, (self.channels, self.kernels, self.strides))
        if not len(self.channels) == len(self.kernels) == len(self.strides):
            raise ValueError("channels, kernels and strides must have equal length")

    @property
    def out_dim(self) -> int:
        return self.channels[-1]

    @classmethod
    def variant_config(cls, name: str, **overrides) -> "EncoderConfig":
        """Named architecture variants (output rate / first-layer kernel)."""
        table = {
            "base_24.5Hz": dict(kernels=(4, 1, 1, 1), strides=(2, 1, 1, 1)),
            "full_50Hz": dict(kernels=(4, 1, 1, 1), strides=(1, 1, 1, 1)),
            "half_11.5Hz": dict(kernels=(4, 4, 1, 1), strides=(2, 2, 1, 1)),
            "kernel8": dict(kernels=(8, 1, 1, 1), strides=(2, 1, 1, 1)),
            "kernel16": dict(kernels=(16, 1, 1, 1), strides=(2, 1, 1, 1)),
        }
        if name not in table:
            raise ValueError(f"unknown encoder variant {name!r}; choose from {sorted(table)}")
        return cls(variant=name, **{**table[name], **overrides})


def output_len(cfg: EncoderConfig, input_len: int) -> int:
    """Frame count after the pad-free conv stack; 0 if the input is too short."""
    n = input_len
    for k, s in zip(cfg.kernels, cfg.strides):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


def frame_rate(cfg: EncoderConfig, input_len: int = 100, input_hz: float = BASE_RATE_HZ) -> float:
    return output_len(cfg, input_len) * input_hz / input_len


class ConvEncoder(nn.Module):
    """Each block is conv -> ReLU -> dropout, with no padding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = cfg.in_channels
        for c_out, k, s in zip(cfg.channels, cfg.kernels, cfg.strides):
            layers += [nn.Conv1d(c_in, c_out, k, stride=s), nn.ReLU(), nn.Dropout(cfg.dropout)]
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, W, C) windows -> (B, F, d) latents."""
        if output_len(self.cfg, x.shape[1]) < 1:
            raise WindowTooShort(f"window of {x.shape[1]} steps is shorter than the receptive field")
        return self.net(x.transpose(1, 2)).transpose(1, 2)


def encode(window, encoder: ConvEncoder) -> torch.Tensor:
    """Encode a single (W, C) window in eval mode; returns (F, d) frames."""
    was_training = encoder.training
    encoder.eval()
    try:
        p = next(encoder.parameters())
        x = torch.as_tensor(getattr(window, "values", window), dtype=p.dtype)
        with torch.no_grad():
            return encoder(x.unsqueeze(0))[0]
    finally:
        encoder.train(was_training)
