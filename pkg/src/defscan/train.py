"""Synthetic-data training loop with CSV metrics and checkpointing."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import ops
from .checkpoint import save_model
from .config import RunConfig, serialize_config
from .data import batch_images, batch_labels, synth_dataset
from .errors import DivergenceError, InputError
from .model import Backbone, build_model, count_params
from .optim import AdamW, lr_at
from .tensor import Tape, Tensor

METRICS_HEADER = "step,lr,loss,train_acc"


def worker_count() -> int:
    """Worker cap from DEFSCAN_THREADS; results are invariant to its value."""
    raw = os.environ.get("DEFSCAN_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"DEFSCAN_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise InputError(f"DEFSCAN_THREADS must be >= 1, got {n}")
    return n


def parallel_map(fn, items: list):
    """Index-ordered map over independent items; threading never changes results."""
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    final_train_acc: float
    metrics_path: str
    checkpoint_path: str
    reached_target: bool


def evaluate(model: Backbone, samples, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over a sample list (no tape, batch-chunked)."""
    n = len(samples)
    idx_chunks = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]

    def run(idx):
        logits = model(Tensor(batch_images(samples, idx)))
        labels = batch_labels(samples, idx)
        loss = ops.cross_entropy(logits, labels)
        correct = int((logits.data.argmax(axis=1) == labels).sum())
        return float(loss.data) * len(idx), correct

    parts = parallel_map(run, idx_chunks)
    total_loss = sum(p[0] for p in parts)
    total_correct = sum(p[1] for p in parts)
    return total_loss / n, total_correct / n


def _epoch_batches(rng: np.random.Generator, n: int, batch: int):
    """Yield index batches forever, reshuffling each epoch."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield perm[i:i + batch]


def run_training(cfg: RunConfig, out_dir: str | None = None,
                 log=None) -> TrainResult:
    """Train per the config; writes metrics.csv and model.ckpt under out_dir."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)

    seeds = np.random.SeedSequence(cfg.train.seed).spawn(2)
    model = build_model(cfg.model, seed=cfg.train.seed)
    data_rng = np.random.default_rng(seeds[1])

    train_set = synth_dataset(cfg.data.kind, cfg.data.train_n, cfg.data.seed)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2),
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)

    batch_size = min(cfg.train.batch_size, len(train_set))
    batches = _epoch_batches(data_rng, len(train_set), batch_size)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")

    reached = False
    last_loss = math.nan
    last_acc = 0.0
    steps_run = 0
    target = cfg.train.early_stop_acc
    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(METRICS_HEADER + "\n")
        mf.flush()
        for step in range(cfg.train.steps):
            lr = lr_at(step, cfg.optim.lr, cfg.train.steps,
                       cfg.optim.warmup_steps, cfg.optim.schedule)
            idx = next(batches)
            images = Tensor(batch_images(train_set, idx))
            labels = batch_labels(train_set, idx)
            opt.zero_grad()
            with Tape() as tape:
                logits = model(images)
                loss = ops.cross_entropy(logits, labels,
                                         smoothing=cfg.train.label_smoothing)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise DivergenceError(f"non-finite loss at step {step}")
                tape.backward(loss)
            opt.step(lr)

            acc = float((logits.data.argmax(axis=1) == labels).mean())
            mf.write(f"{step},{lr!r},{loss_val!r},{acc!r}\n")
            mf.flush()
            last_loss, last_acc = loss_val, acc
            steps_run = step + 1
            if log is not None and (step % 25 == 0 or step == cfg.train.steps - 1):
                log(f"step={step} lr={lr:.3e} loss={loss_val:.4f} acc={acc:.3f}")

            if target is not None and (step + 1) % cfg.train.acc_check_every == 0:
                _, full_acc = evaluate(model, train_set, batch_size=64)
                if log is not None:
                    log(f"step={step} full_train_acc={full_acc:.3f}")
                if full_acc >= target:
                    reached = True
                    break

    save_model(ckpt_path, serialize_config(cfg), model)
    return TrainResult(steps_run=steps_run, final_loss=last_loss,
                       final_train_acc=last_acc, metrics_path=metrics_path,
                       checkpoint_path=ckpt_path, reached_target=reached)


def model_summary(cfg: RunConfig) -> str:
    model = build_model(cfg.model, seed=cfg.train.seed)
    return f"params={count_params(model)}"
