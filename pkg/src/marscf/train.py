"""Maximum-likelihood training and bits/dim evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Dataset, bits_per_dim, dequantize
from .model import MARSCF
from .optim import Adamax, clip_grad_norm

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_NONFINITE = 3


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 8e-4
    seed: int = 0
    clip_norm: float = 50.0
    checkpoint_every: int = 0
    init_batch_size: int = 512
    eval_seed: int = 1234
    eval_batch_size: int = 256

    def validate(self) -> TrainConfig:
        if self.batch_size < 1 or self.init_batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        # lr == 0 is allowed: it freezes parameters, which is useful for checks
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        return self


@dataclass
class TrainResult:
    model: MARSCF
    optimizer: Adamax
    records: list[dict] = field(default_factory=list)
    skipped_steps: int = 0

    def history(self, split: str = "val") -> list[float]:
        return [r["bpd"] for r in self.records if r["split"] == split]


def _image_noise(image: np.ndarray, seed: int) -> np.ndarray:
    key = zlib.crc32(np.ascontiguousarray(image).tobytes())
    return np.random.default_rng([seed, key]).random(image.shape)


def evaluate(model: MARSCF, dataset: Dataset, split: str = "val", seed: int = 1234,
             batch_size: int = 256) -> float:
    """Mean bits/dim over ``split``.

    Each image's dequantization noise is keyed by its content and ``seed``, so
    the result does not depend on the order of the split.
    """
    data = dataset.split(split)
    if len(data) == 0:
        raise ValueError(f"cannot evaluate on an empty {split!r} split")
    dims = int(np.prod(data.shape[1:]))
    values = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data[start:start + batch_size]
            noise = np.stack([_image_noise(img, seed) for img in batch])
            x = dequantize(batch, bits=dataset.bits, noise=noise, dtype=model.dtype)
            logp = model.log_prob(T.Tensor(x)).data
            values.extend(bits_per_dim(logp, dims, dataset.bits).tolist())
    return math.fsum(values) / len(values)


def _write_record(handle, record: dict) -> None:
    if handle is not None:
        handle.write(json.dumps(record) + "\n")
        handle.flush()


def train(model: MARSCF, dataset: Dataset, config: TrainConfig, log_path=None,
          checkpoint_dir=None, optimizer: Adamax | None = None) -> TrainResult:
    """Fit ``model`` by maximizing the exact log-likelihood of dequantized data.

    The first call on an uninitialized model spends one batch on ActNorm
    initialization (no optimizer step). One metrics record per split is
    emitted per epoch; epoch 0 is the post-initialization validation score.
    """
    config.validate()
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed)
    dims = int(np.prod(dataset.shape))
    params = model.parameters()
    if optimizer is None:
        optimizer = Adamax(params, lr=config.lr)
    result = TrainResult(model, optimizer)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    handle = open(log_path, "w") if log_path is not None else None
    start = time.perf_counter()

    def emit(record):
        result.records.append(record)
        _write_record(handle, record)
        log.info("epoch %d %s bpd %.4f", record["epoch"], record["split"], record["bpd"])

    try:
        if not model.initialized:
            order = rng.permutation(len(dataset.train))[:config.init_batch_size]
            model.initialize(dequantize(dataset.train[order], rng, dataset.bits, dtype=model.dtype))
        if len(dataset.val):
            emit({"epoch": 0, "split": "val",
                  "bpd": evaluate(model, dataset, "val", config.eval_seed, config.eval_batch_size),
                  "loss": None, "grad_norm": None, "elapsed": time.perf_counter() - start})

        consecutive_bad = 0
        for epoch in range(1, config.epochs + 1):
            losses, norms = [], []
            for batch in dataset.batches("train", config.batch_size, rng):
                x = T.Tensor(dequantize(batch, rng, dataset.bits, dtype=model.dtype))
                _, logp = model(x)
                loss = -T.mean(logp)
                if not np.isfinite(loss.item()):
                    result.skipped_steps += 1
                    consecutive_bad += 1
                    log.warning("non-finite loss at epoch %d; step skipped (%d in a row)",
                                epoch, consecutive_bad)
                    if consecutive_bad >= MAX_CONSECUTIVE_NONFINITE:
                        raise TrainingAborted(
                            f"{consecutive_bad} consecutive non-finite losses at epoch {epoch}; "
                            f"last loss {loss.item()!r}")
                    continue
                consecutive_bad = 0
                optimizer.zero_grad()
                T.backward(loss)
                norms.append(clip_grad_norm(params, config.clip_norm))
                optimizer.step()
                losses.append(loss.item())
            train_loss = float(np.mean(losses)) if losses else float("nan")
            emit({"epoch": epoch, "split": "train",
                  "bpd": float(bits_per_dim(-train_loss, dims, dataset.bits)),
                  "loss": train_loss, "grad_norm": float(np.mean(norms)) if norms else None,
                  "elapsed": time.perf_counter() - start})
            if len(dataset.val):
                emit({"epoch": epoch, "split": "val",
                      "bpd": evaluate(model, dataset, "val", config.eval_seed, config.eval_batch_size),
                      "loss": None, "grad_norm": None, "elapsed": time.perf_counter() - start})
            if ckpt_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch{epoch:04d}.ckpt", model, optimizer,
                                {"epoch": epoch, "train": asdict(config)})
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "final.ckpt", model, optimizer,
                            {"epoch": config.epochs, "train": asdict(config)})
    finally:
        if handle is not None:
            handle.close()
    return result


def deterministic_fields(records: list[dict]) -> list[dict]:
    """Metric records without the wall-clock ``elapsed`` field."""
    return [{k: v for k, v in r.items() if k != "elapsed"} for r in records]
