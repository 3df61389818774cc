"""VQ-CPC pre-training loop, checkpoint container and token extraction."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .aggregator import AggregatorConfig, CPCConfig, VQCPC
from .encoder import EncoderConfig
from .tokens import TokenSequence

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VQCPCKPT"
CHECKPOINT_VERSION = 1


class EmptySplit(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    l2: float = 1e-4
    batch: int = 128
    max_epochs: int = 50
    warmup_frac: float = 0.08
    early_stop_patience: int = 5
    early_stop_min_epoch: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a VQCPC network."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    cpc: CPCConfig = field(default_factory=CPCConfig)
    groups: int = 2
    vars: int = 100
    gamma: float = 0.25
    codebook_init_scale: float = 0.1
    # "normal": N(0, init_scale^2) entries; "data": k-means++ seeds from the first training batch
    codebook_init: str = "data"
    pre_quant_norm: bool = False

    def __post_init__(self):
        if self.codebook_init not in ("normal", "data"):
            raise ValueError(f"unknown codebook_init {self.codebook_init!r}")

    def build(self) -> VQCPC:
        return VQCPC(
            self.encoder, self.aggregator, self.cpc, self.groups, self.vars, self.gamma,
            self.codebook_init_scale, self.pre_quant_norm,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            encoder=EncoderConfig(**d.pop("encoder", {})),
            aggregator=AggregatorConfig(**d.pop("aggregator", {})),
            cpc=CPCConfig(**d.pop("cpc", {})),
            **d,
        )


@dataclass
class PretrainState:
    model: VQCPC
    model_config: ModelConfig
    train_config: TrainConfig
    optimizer_state: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # e.g. input normalization, carried in the checkpoint header


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.warmup_frac * total_steps)))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at total_steps."""
    warm = warmup_steps(total_steps, cfg)
    if step <= warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class EarlyStopping:
    """Patience counting starts only after `min_epoch` epochs (1-indexed)."""

    def __init__(self, patience: int = 5, min_epoch: int = 20):
        self.patience, self.min_epoch = patience, min_epoch
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record a validation loss; returns True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.bad_epochs = 0
            return False
        if epoch > self.min_epoch:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _as_tensor(windows, dtype=torch.float32) -> torch.Tensor:
    if torch.is_tensor(windows):
        return windows.to(dtype)
    if isinstance(windows, np.ndarray):
        return torch.as_tensor(windows, dtype=dtype)
    return torch.as_tensor(np.stack([w.values for w in windows]), dtype=dtype)


@torch.no_grad()
def evaluate_loss(model: VQCPC, x: torch.Tensor, batch: int, seed: int) -> float:
    """Mean total loss in eval mode with a fixed negative-sampling seed."""
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, 0
    for i in range(0, len(x), batch):
        xb = x[i : i + batch]
        total += model(xb, generator=gen)["total"].item() * len(xb)
        n += len(xb)
    model.train(was)
    return total / n


def make_optimizer(model: VQCPC, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay: the L2 term is not folded into Adam's moments
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.l2)


def pretrain(
    train_windows,
    val_windows,
    cfg: TrainConfig = None,
    model_config: ModelConfig = None,
    val_metric: Optional[Callable[[VQCPC, int], float]] = None,
    log_every: int = 1,
) -> PretrainState:
    """Train VQ-CPC and return the state at the best validation loss.

    `val_metric(model, epoch)` replaces the default validation loss; used to
    drive early stopping from a scripted metric stream.
    """
    cfg = cfg or TrainConfig()
    model_config = model_config or ModelConfig()
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise EmptySplit("pre-training needs non-empty train and validation splits")
    x_train, x_val = _as_tensor(train_windows), _as_tensor(val_windows)

    torch.manual_seed(cfg.seed)
    model = model_config.build()
    rng = np.random.default_rng(cfg.seed)
    if model_config.codebook_init == "data":
        model.eval()
        with torch.no_grad():
            first = x_train[rng.permutation(len(x_train))[: cfg.batch]]
            model.codebook.init_from_latents(model.latents(first), cfg.seed)
    opt = make_optimizer(model, cfg)
    neg_gen = torch.Generator().manual_seed(cfg.seed + 1)

    steps_per_epoch = math.ceil(len(x_train) / cfg.batch)
    total_steps = cfg.max_epochs * steps_per_epoch
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.early_stop_min_epoch)
    state = PretrainState(model, model_config, cfg)
    best = None
    step = 0
    t0 = time.time()
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(x_train))
        running = 0.0
        for i in range(0, len(order), cfg.batch):
            step += 1
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total_steps, cfg)
            out = model(x_train[order[i : i + cfg.batch]], generator=neg_gen)
            opt.zero_grad()
            out["total"].backward()
            opt.step()
            running += out["total"].item()
        train_loss = running / steps_per_epoch
        val = val_metric(model, epoch) if val_metric else evaluate_loss(model, x_val, cfg.batch, cfg.seed + 2)
        state.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val})
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d train %.4f val %.4f (%.0fs)", epoch, train_loss, val, time.time() - t0)
        improved = val < stopper.best
        stop = stopper.update(epoch, val)
        if improved:
            best = (copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()), step, epoch)
        if stop:
            logger.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    model_sd, opt_sd, best_step, best_epoch = best
    model.load_state_dict(model_sd)
    state.optimizer_state = opt_sd
    state.step, state.epoch, state.best_val = best_step, best_epoch, stopper.best
    state.stopped_epoch = epoch
    model.eval()
    return state


@torch.no_grad()
def extract_indices(model: VQCPC, windows, batch: int = 256) -> np.ndarray:
    """(N, F, G) codebook indices for each window, computed in eval mode."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = _as_tensor(windows, dtype)
    out = []
    for i in range(0, len(x), batch):
        z = model.latents(x[i : i + batch])
        out.append(model.codebook(z).indices)
    model.train(was)
    return torch.cat(out).numpy()


def extract_tokens(state, windows, batch: int = 256) -> list[TokenSequence]:
    """One sequence of composite (G-tuple) symbols per window."""
    model = state.model if isinstance(state, PretrainState) else state
    idx = extract_indices(model, windows, batch)
    seqs = []
    for i, w in enumerate(windows):
        symbols = [tuple(int(v) for v in frame) for frame in idx[i]]
        seqs.append(TokenSequence(symbols, getattr(w, "label", None), getattr(w, "participant_id", "")))
    return seqs


# --- checkpoint container -------------------------------------------------
#
# layout: MAGIC | u32 version | u64 header length | JSON header | tensor bytes
# Tensor bytes are raw little-endian arrays at the offsets listed in the header.


def _flatten_optimizer(opt_state: dict) -> tuple[dict, dict]:
    tensors, meta = {}, {"param_groups": opt_state.get("param_groups", []), "state": {}}
    for pid, pstate in opt_state.get("state", {}).items():
        meta["state"][str(pid)] = {}
        for key, val in pstate.items():
            if torch.is_tensor(val):
                tensors[f"optim.{pid}.{key}"] = val
                meta["state"][str(pid)][key] = "tensor"
            else:
                meta["state"][str(pid)][key] = val
    return tensors, meta


def _unflatten_optimizer(meta: dict, tensors: dict) -> dict:
    state = {}
    for pid, entries in meta["state"].items():
        state[int(pid)] = {
            key: tensors[f"optim.{pid}.{key}"] if val == "tensor" else val for key, val in entries.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def write_container(path, header: dict, tensors: dict) -> None:
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a VQ-CPC checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    start = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    base = start + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        buf = data[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def save_checkpoint(state: PretrainState, path) -> None:
    opt_tensors, opt_meta = _flatten_optimizer(state.optimizer_state)
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    tensors.update(opt_tensors)
    header = {
        "model_config": state.model_config.to_dict(),
        "train_config": asdict(state.train_config),
        "optimizer": opt_meta,
        "step": state.step,
        "epoch": state.epoch,
        "best_val": state.best_val,
        "history": state.history,
        "extra": state.extra,
    }
    write_container(path, header, tensors)


def load_checkpoint(path) -> PretrainState:
    header, tensors = read_container(path)
    mcfg = ModelConfig.from_dict(header["model_config"])
    model = mcfg.build()
    sd = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.to(next(iter(sd.values())).dtype if sd else torch.float32)
    model.load_state_dict(sd)
    model.eval()
    return PretrainState(
        model,
        mcfg,
        TrainConfig(**header["train_config"]),
        _unflatten_optimizer(header["optimizer"], tensors),
        header["step"],
        header["epoch"],
        header["best_val"],
        header["history"],
        header.get("extra", {}),
    )
