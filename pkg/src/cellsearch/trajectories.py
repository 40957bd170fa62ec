"""Training-data extraction from finished trees: terminal path enumeration,
sampling/filtering/dedup, and per-node (conversation, Q) record emission.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from .gateway import Message, conversation_tokens
from .protocol import assemble_conversation
from .tree import SearchTree

log = logging.getLogger(__name__)

LABEL_CORRECT = "correct"
LABEL_INCORRECT = "incorrect"

DEFAULT_RECORD_TOKEN_BUDGET = 100_000


@dataclass(frozen=True)
class TerminalPath:
    node_ids: tuple
    terminal_reward: Optional[float]
    timeout_poisoned: bool
    content_hash: str

    def leaf_id(self) -> int:
        return self.node_ids[-1]


@dataclass(frozen=True)
class TrajectoryRecord:
    task_id: str
    node_id: int
    path_label: str
    q_value: float
    conversation: List[Message]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "node_id": self.node_id,
            "path_label": self.path_label,
            "q_value": self.q_value,
            "conversation": [m.to_dict() for m in self.conversation],
        }


def _path_content_hash(tree: SearchTree, node_ids: Sequence[int]) -> str:
    h = hashlib.sha256()
    for node_id in node_ids:
        node = tree.node(node_id)
        for message in node.messages:
            if message.role == "assistant":
                h.update(message.content.encode("utf-8"))
                h.update(b"\x1e")
    return h.hexdigest()


def enumerate_terminal_paths(tree: SearchTree) -> List[TerminalPath]:
    """One root-to-leaf path per terminal node, in node-id order."""
    out: List[TerminalPath] = []
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        if not node.terminal:
            continue
        path = [n.id for n in tree.path_to(node_id)]
        poisoned = any(tree.node(i).timeout_poisoned for i in path)
        out.append(
            TerminalPath(
                node_ids=tuple(path),
                terminal_reward=node.reward,
                timeout_poisoned=poisoned,
                content_hash=_path_content_hash(tree, path),
            )
        )
    return out


def path_is_correct(path: TerminalPath, reward_correct: float) -> bool:
    return path.terminal_reward is not None and path.terminal_reward == reward_correct


def sample_paths(
    paths: Sequence[TerminalPath],
    max_correct: int = 4,
    max_incorrect: int = 4,
    seed: int = 0,
    reward_correct: float = 1.0,
) -> List[TerminalPath]:
    """Filter poisoned paths, dedup by content, then cap each class.

    Sampling is uniform without replacement and deterministic for a fixed
    seed; the selected paths keep their original discovery order.
    """
    survivors: List[TerminalPath] = []
    seen = set()
    for path in paths:
        if path.timeout_poisoned:
            continue
        if path.content_hash in seen:
            continue
        seen.add(path.content_hash)
        survivors.append(path)

    correct = [p for p in survivors if path_is_correct(p, reward_correct)]
    incorrect = [p for p in survivors if not path_is_correct(p, reward_correct)]

    rng = random.Random(seed)

    def cap(group: List[TerminalPath], limit: int) -> List[TerminalPath]:
        if len(group) <= limit:
            return list(group)
        picked = rng.sample(range(len(group)), limit)
        return [group[i] for i in sorted(picked)]

    chosen = cap(correct, max_correct) + cap(incorrect, max_incorrect)
    order = {p.content_hash: i for i, p in enumerate(survivors)}
    chosen.sort(key=lambda p: order[p.content_hash])
    return chosen


def emit_training_records(
    tree: SearchTree,
    paths: Sequence[TerminalPath],
    reward_correct: float = 1.0,
    max_input_tokens: int = DEFAULT_RECORD_TOKEN_BUDGET,
) -> List[TrajectoryRecord]:
    """One record per non-root node on the selected paths.

    Nodes shared by several paths are emitted once, labeled by the first
    selected path that contains them.  Records whose conversation exceeds
    the policy input budget are dropped (and counted in the log).
    """
    records: List[TrajectoryRecord] = []
    emitted = set()
    dropped = 0
    for path in paths:
        label = LABEL_CORRECT if path_is_correct(path, reward_correct) else LABEL_INCORRECT
        for node_id in path.node_ids:
            node = tree.node(node_id)
            if node.parent is None or node_id in emitted:
                continue
            emitted.add(node_id)
            conversation = assemble_conversation(tree, node_id)
            if conversation_tokens(conversation) > max_input_tokens:
                dropped += 1
                continue
            q = node.value_sum / node.visit_count if node.visit_count > 0 else 0.0
            records.append(
                TrajectoryRecord(
                    task_id=tree.task_id,
                    node_id=node_id,
                    path_label=label,
                    q_value=max(-1.0, min(1.0, q)),
                    conversation=conversation,
                )
            )
    if dropped:
        log.warning(
            "dropped %d over-budget trajectory records for task %s", dropped, tree.task_id
        )
    return records


def write_dataset(records: Sequence[TrajectoryRecord], path) -> int:
    """Line-delimited JSON, one record per line, stable field order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=True, separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


def read_dataset(path) -> List[TrajectoryRecord]:
    records: List[TrajectoryRecord] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            records.append(
                TrajectoryRecord(
                    task_id=doc["task_id"],
                    node_id=doc["node_id"],
                    path_label=doc["path_label"],
                    q_value=doc["q_value"],
                    conversation=[Message.from_dict(m) for m in doc["conversation"]],
                )
            )
    return records
