"""SGD training loop with momentum and weight decay, checkpointing, and
held-out validation.

Every iteration draws its randomness from a counter-based stream keyed by the
iteration number, so a run resumed from a checkpoint replays the exact same
batches and augmentations as an uninterrupted run.

Checkpoint layout: 4 magic bytes "MENT", a little-endian uint32 format
version, a uint64 header length, a JSON header (model and train configs,
iteration counter, ordered blob directory), then the raw little-endian blob
payloads in directory order.  Blobs cover parameters, batch-norm running
statistics and, optionally, the optimizer's momentum buffers.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Rng
from .model import ModelConfig, ModelParams, build, forward
from .losses import (SampleSet, combined_loss, cross_entropy,
                     per_pixel_cross_entropy, hard_negative_sample)
from .saliency import saliency_maps
from .metrics import evaluate, aggregate
from .data import augment

MAGIC = b"MENT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_size: int = 5
    iterations: int = 5000
    checkpoint_interval: int = 500
    seed: int = 0
    lam: float = 1.0
    loss: str = "combined"        # "combined" or "ce"
    mine_metric_loss: bool = True  # metric term shares the mined pixel set
    augment: bool = True
    # optional global gradient-norm ceiling.  The metric objective is
    # unbounded below, so small models need this to keep the embedding
    # scale growth linear instead of explosive; None disables it.
    clip_norm: float = None
    # optional cross-entropy warm-up: for the first warmup_iterations the
    # metric term is off and warmup_learning_rate (default: learning_rate)
    # applies.  At initialization the metric gradient dwarfs the CE gradient
    # by two orders of magnitude, so small models never learn a usable
    # partition without letting the CE head settle first.
    warmup_iterations: int = 0
    warmup_learning_rate: float = None

    def __post_init__(self):
        if min(self.learning_rate, self.momentum, self.weight_decay) < 0:
            raise ValueError("rates must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.iterations < 0 or self.checkpoint_interval < 1:
            raise ValueError("invalid iteration counts")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be non-negative")
        if self.warmup_learning_rate is not None and self.warmup_learning_rate < 0:
            raise ValueError("warmup_learning_rate must be non-negative")
        if self.loss not in ("combined", "ce"):
            raise ValueError(f"unknown loss mode {self.loss!r}")

    def to_dict(self):
        return {"learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "iterations": self.iterations,
                "checkpoint_interval": self.checkpoint_interval,
                "seed": self.seed, "lam": self.lam, "loss": self.loss,
                "mine_metric_loss": self.mine_metric_loss,
                "augment": self.augment, "clip_norm": self.clip_norm,
                "warmup_iterations": self.warmup_iterations,
                "warmup_learning_rate": self.warmup_learning_rate}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def at_iteration(self, it: int) -> "TrainConfig":
        """Effective config for one iteration; during warm-up the loss is
        CE-only and the warm-up learning rate applies."""
        if self.loss != "combined" or it >= self.warmup_iterations:
            return self
        lr = (self.learning_rate if self.warmup_learning_rate is None
              else self.warmup_learning_rate)
        return replace(self, loss="ce", learning_rate=lr)


@dataclass
class OptimState:
    velocity: dict = field(default_factory=dict)  # name -> float64 buffer
    iteration: int = 0


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig  # None for inference-only checkpoints
    optim_state: OptimState    # None when not saved
    iteration: int


def sgd_step(params: ModelParams, grads: dict, state: OptimState,
             config: TrainConfig) -> None:
    """v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v.

    Weight decay is coupled (enters the gradient before momentum).
    """
    for name, p in params.named_parameters():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = config.momentum * v + g.astype(p.data.dtype, copy=False)
        if config.weight_decay:
            v += config.weight_decay * p.data
        state.velocity[name] = v.astype(p.data.dtype, copy=False)
        p.data -= config.learning_rate * state.velocity[name]
    state.iteration += 1


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most
    ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                              for g in grads.values())))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def _image_loss(out, i, labels, config: TrainConfig):
    """Loss tensor and component values for image i of a train-mode batch."""
    probs_np = out.ce_probs.data[i]
    ppce = per_pixel_cross_entropy(probs_np, labels)
    sample = hard_negative_sample(ppce, labels)
    probs_i = out.ce_probs.select_image(i)
    if config.loss == "ce":
        l_ce = cross_entropy(probs_i, labels, sample)
        return l_ce * config.lam, float(l_ce.data), 0.0
    emb_i = out.embedding.select_image(i)
    metric_sample = sample
    if not config.mine_metric_loss:
        lab = np.asarray(labels, dtype=bool).reshape(-1)
        metric_sample = SampleSet(positive=np.flatnonzero(lab),
                                  negative=np.flatnonzero(~lab))
    lv = combined_loss(emb_i, probs_i, labels, sample, lam=config.lam,
                       metric_sample=metric_sample)
    return lv.total, lv.l_ce, lv.l_ml_star


def validate(params: ModelParams, dataset):
    """Mean F-measure / MAE of the metric saliency maps over a dataset."""
    reports = []
    for rec in dataset:
        out = forward(params, rec.image[None].astype(np.float32),
                      mode="inference", update_running=False)
        maps = saliency_maps(out)
        reports.append(evaluate(maps.metric_map, rec.mask))
    return aggregate(reports)


def train_loop(params: ModelParams, config: TrainConfig, train_set,
               val_set=None, out_dir=None, start_iteration=0,
               optim_state: OptimState = None, log=None):
    """Run iterations [start_iteration, config.iterations); returns the
    optimizer state, the loss history rows and the best validation report.

    History rows are (iteration, l_ce, l_ml_star, total), averaged over the
    batch.  With ``out_dir`` set, checkpoints and a loss CSV are written; the
    checkpoint with the best validation F-measure is copied to best.ment.
    """
    if not train_set:
        raise ValueError("empty training set")
    if start_iteration > 0 and optim_state is None:
        raise CheckpointError("resume requires a checkpoint with optimizer state")
    if optim_state is None:
        optim_state = OptimState()
    if log is None:
        log = lambda msg: print(msg, file=sys.stderr)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    history = []
    best = None
    best_f = -1.0
    for it in range(start_iteration, config.iterations):
        step_config = config.at_iteration(it)
        rng = Rng(config.seed, stream=it + 1)
        idx = rng.integers(0, len(train_set), (config.batch_size,))
        batch = []
        for j in idx:
            rec = train_set[int(j)]
            if config.augment:
                rec = augment(rec, rng)
            batch.append(rec)
        images = np.stack([r.image for r in batch]).astype(np.float32)
        out = forward(params, images, mode="train")

        totals, ces, mls = [], [], []
        for i, rec in enumerate(batch):
            labels = rec.mask
            if not labels.any() or labels.all():
                log(f"iteration {it}: skipping degenerate sample {rec.id}")
                continue
            total_i, ce_i, ml_i = _image_loss(out, i, labels, step_config)
            totals.append(total_i)
            ces.append(ce_i)
            mls.append(ml_i)
        if not totals:
            log(f"iteration {it}: whole batch degenerate, skipping step")
            continue

        total = totals[0]
        for t in totals[1:]:
            total = total + t
        total = total * (1.0 / len(totals))
        total.backward(np.ones(()))

        grads = {}
        for name, p in params.named_parameters():
            if p.grad is not None:
                grads[name] = p.grad
            p.zero_grad()
        if step_config.clip_norm is not None:
            clip_gradients(grads, step_config.clip_norm)
        sgd_step(params, grads, optim_state, step_config)
        history.append((it, float(np.mean(ces)), float(np.mean(mls)),
                        float(total.data)))

        last = it + 1 == config.iterations
        if out_dir and ((it + 1) % config.checkpoint_interval == 0 or last):
            path = os.path.join(out_dir, f"ckpt_{it + 1:07d}.ment")
            save_checkpoint(path, params, train_config=config,
                            optim_state=optim_state, iteration=it + 1)
            if val_set:
                rep = validate(params, val_set)
                log(f"iteration {it + 1}: val F={rep.f_beta:.4f} "
                    f"MAE={rep.mae:.4f}")
                if rep.f_beta > best_f:
                    best_f = rep.f_beta
                    best = rep
                    shutil.copyfile(path, os.path.join(out_dir, "best.ment"))
    if out_dir:
        write_loss_csv(os.path.join(out_dir, "loss.csv"), history)
    return optim_state, history, best


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "l_ce", "l_ml_star", "total"])
        w.writerows(history)


# -- checkpoint serialization ----------------------------------------------------

def _blob_directory(params: ModelParams, optim_state):
    blobs = [("param:" + n, t.data) for n, t in params.named_parameters()]
    blobs += [("buffer:" + n, b) for n, b in params.named_buffers()]
    if optim_state is not None:
        for name, t in params.named_parameters():
            v = optim_state.velocity.get(name)
            if v is None:
                v = np.zeros(t.data.shape, dtype=np.float64)
            blobs.append(("optim:" + name, v))
    return blobs


def save_checkpoint(path, params: ModelParams, train_config: TrainConfig = None,
                    optim_state: OptimState = None, iteration: int = 0) -> None:
    blobs = _blob_directory(params, optim_state)
    header = {
        "model": params.config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "iteration": int(iteration),
        "has_optimizer": optim_state is not None,
        "blobs": [[name, str(arr.dtype), list(arr.shape)] for name, arr in blobs],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint64(len(payload)).tobytes())
        f.write(payload)
        for _, arr in blobs:
            f.write(np.ascontiguousarray(arr).astype(
                arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version = int(np.frombuffer(buf[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = int(np.frombuffer(buf[8:16], dtype="<u8")[0])
    header = json.loads(buf[16:16 + hlen].decode())
    pos = 16 + hlen

    arrays = {}
    for name, dtype, shape in header["blobs"]:
        dt = np.dtype(dtype).newbyteorder("<")
        need = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        chunk = buf[pos:pos + need]
        if len(chunk) != need:
            raise CheckpointError(f"{path}: truncated payload in blob {name!r} "
                                  f"(expected {need} bytes, got {len(chunk)})")
        arrays[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(
            np.dtype(dtype))
        pos += need

    cfg = ModelConfig.from_dict(header["model"])
    params = build(cfg, Rng(0))
    for name, p in params.named_parameters():
        key = "param:" + name
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter blob {name!r}")
        p.data = arrays[key].copy()
    for name, _ in params.named_buffers():
        key = "buffer:" + name
        if key not in arrays:
            raise CheckpointError(f"{path}: missing buffer blob {name!r}")
        params.set_buffer(name, arrays[key])

    optim_state = None
    if header["has_optimizer"]:
        vel = {name: arrays["optim:" + name].copy()
               for name, _ in params.named_parameters()}
        optim_state = OptimState(velocity=vel, iteration=header["iteration"])
    train_config = (TrainConfig.from_dict(header["train"])
                    if header["train"] else None)
    return Checkpoint(params=params, train_config=train_config,
                      optim_state=optim_state, iteration=header["iteration"])
