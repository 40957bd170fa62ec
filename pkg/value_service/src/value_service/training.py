"""MSE training of the value head and adapters against trajectory Q-values.

The base model stays frozen; only the low-rank adapters and the head are
optimized (AdamW, linear warmup, weight decay).
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from torch import nn

from .data import ValueTrainingSample, collate_batch, encode_sample
from .model import (
    ModelSpec,
    ValueModel,
    base_weights_fingerprint,
    build_model,
    build_tokenizer,
    save_artifact,
)

log = logging.getLogger(__name__)

TRAINING_LOG = "training_log.jsonl"


@dataclass
class TrainingConfig:
    epochs: int = 3
    batch_size: int = 4
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    max_context: Optional[int] = None  # defaults to the model spec's budget
    shuffle_seed: int = 0
    device: str = "cpu"
    log_every: int = 20


@dataclass
class TrainingReport:
    steps: int
    final_train_mse: float
    loss_log: List[dict] = field(default_factory=list)
    base_fingerprint_before: str = ""
    base_fingerprint_after: str = ""


def _evaluate_mse(model: ValueModel, batches, device: str) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for input_ids, mask, targets in batches:
            preds = model(input_ids.to(device), mask.to(device))
            total += torch.nn.functional.mse_loss(preds, targets.to(device), reduction="sum").item()
            count += len(targets)
    model.train()
    return total / max(count, 1)


def train(
    samples: Sequence[ValueTrainingSample],
    spec: ModelSpec,
    config: TrainingConfig,
    out_dir,
    model: Optional[ValueModel] = None,
    seed: int = 0,
) -> TrainingReport:
    """Train on the given samples and persist the artifact to ``out_dir``."""
    if not samples:
        raise ValueError("training dataset is empty")
    device = config.device
    if model is None:
        model = build_model(spec, seed=seed)
    model.to(device)
    fingerprint_before = base_weights_fingerprint(model)

    tokenizer = build_tokenizer(spec)
    max_context = config.max_context or spec.max_context
    encoded = [encode_sample(s, tokenizer, max_context) for s in samples]
    targets = [s.target_q for s in samples]

    def make_batches(order: List[int]):
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            yield collate_batch([encoded[i] for i in chunk], [targets[i] for i in chunk],
                                tokenizer.pad_id)

    trainable = model.trainable_parameters()
    optimizer = torch.optim.AdamW(
        trainable, lr=config.learning_rate, weight_decay=config.weight_decay
    )

    def lr_lambda(step: int) -> float:
        if config.warmup_steps <= 0:
            return 1.0
        return min(1.0, (step + 1) / config.warmup_steps)

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda)

    rng = random.Random(config.shuffle_seed)
    order = list(range(len(samples)))
    model.train()
    step = 0
    loss_log: List[dict] = []
    for epoch in range(config.epochs):
        rng.shuffle(order)
        for input_ids, mask, batch_targets in make_batches(order):
            optimizer.zero_grad()
            preds = model(input_ids.to(device), mask.to(device))
            loss = torch.nn.functional.mse_loss(preds, batch_targets.to(device))
            loss.backward()
            optimizer.step()
            scheduler.step()
            step += 1
            if step % config.log_every == 0 or step == 1:
                entry = {"step": step, "epoch": epoch, "loss": loss.item()}
                loss_log.append(entry)
                log.info("step %d epoch %d loss %.5f", step, epoch, loss.item())

    final_mse = _evaluate_mse(model, make_batches(list(range(len(samples)))), device)
    fingerprint_after = base_weights_fingerprint(model)
    if fingerprint_after != fingerprint_before:
        raise RuntimeError("frozen base weights changed during training")

    out = save_artifact(model, spec, out_dir)
    log_path = out / TRAINING_LOG
    with log_path.open("w", encoding="utf-8") as fh:
        for entry in loss_log:
            fh.write(json.dumps(entry) + "\n")
        fh.write(json.dumps({"final_train_mse": final_mse, "steps": step}) + "\n")

    return TrainingReport(
        steps=step,
        final_train_mse=final_mse,
        loss_log=loss_log,
        base_fingerprint_before=fingerprint_before,
        base_fingerprint_after=fingerprint_after,
    )
