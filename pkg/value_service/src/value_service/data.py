"""Training-data loading: the trajectory JSONL emitted by the search engine,
one ``{task_id, node_id, path_label, q_value, conversation}`` record per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import torch

from .tokenizers import ConversationTokenizer, truncate_conversation


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ValueTrainingSample:
    conversation: tuple
    target_q: float

    def __post_init__(self):
        if not self.conversation:
            raise DatasetError("conversation must be non-empty")
        if not -1.0 <= self.target_q <= 1.0:
            raise DatasetError(f"target_q {self.target_q} outside [-1, 1]")


def load_dataset(path) -> List[ValueTrainingSample]:
    samples: List[ValueTrainingSample] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                conversation = tuple(
                    {"role": m["role"], "content": m["content"]} for m in doc["conversation"]
                )
                samples.append(
                    ValueTrainingSample(conversation=conversation, target_q=float(doc["q_value"]))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    if not samples:
        raise DatasetError(f"{path} holds no training samples")
    return samples


def encode_sample(
    sample: ValueTrainingSample,
    tokenizer: ConversationTokenizer,
    max_context: int,
) -> List[int]:
    trimmed = truncate_conversation(sample.conversation, tokenizer, max_context)
    ids = tokenizer.encode(tokenizer.render(trimmed))
    if len(ids) > max_context:
        ids = ids[-max_context:]
    return ids or [tokenizer.pad_id]


def collate_batch(
    encoded: Sequence[List[int]],
    targets: Sequence[float],
    pad_id: int,
) -> tuple:
    width = max(len(ids) for ids in encoded)
    input_ids = torch.full((len(encoded), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(encoded), width), dtype=torch.long)
    for i, ids in enumerate(encoded):
        input_ids[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[i, : len(ids)] = 1
    return input_ids, mask, torch.tensor(targets, dtype=torch.float32)
