"""Lossless tree snapshots with a canonical byte layout.

Snapshots are JSON documents with a pinned field order and compact
separators so that ``snapshot -> load -> snapshot`` reproduces identical
bytes on any platform (floats use shortest round-trip decimals).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import List, Optional

from .gateway import Message
from .protocol import AnswerLabels, parse_turn, strip_observation_text
from .tree import STATUS_ANSWER, SearchConfig, SearchNode, SearchTree

SCHEMA_VERSION = 1


class SnapshotVersionError(ValueError):
    pass


def _config_doc(config: SearchConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(SearchConfig)}


def _node_doc(node: SearchNode) -> dict:
    return {
        "id": node.id,
        "parent": node.parent,
        "depth": node.depth,
        "messages": [m.to_dict() for m in node.messages],
        "prior": node.prior,
        "visits": node.visit_count,
        "value_sum": node.value_sum,
        "status": node.status,
        "reward": node.reward,
        "labels": [[n, r] for n, r in node.labels.entries] if node.labels is not None else None,
        "consecutive_errors": node.consecutive_errors,
        "timeout_poisoned": node.timeout_poisoned,
    }


def snapshot_tree(tree: SearchTree) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "task_id": tree.task_id,
        "config": _config_doc(tree.config),
        "rng_seed": tree.rng_seed,
        "iterations_done": tree.iterations_done,
        "nodes": [_node_doc(tree.nodes[i]) for i in sorted(tree.nodes)],
    }


def dumps_snapshot(document: dict) -> str:
    return json.dumps(document, ensure_ascii=True, separators=(",", ":")) + "\n"


def _restore_node(doc: dict) -> SearchNode:
    messages = [Message.from_dict(m) for m in doc["messages"]]
    labels = None
    if doc.get("labels") is not None:
        labels = AnswerLabels(entries=tuple((n, r) for n, r in doc["labels"]))
    node = SearchNode(
        id=doc["id"],
        parent=doc["parent"],
        depth=doc["depth"],
        messages=messages,
        prior=doc["prior"],
        visit_count=doc["visits"],
        value_sum=doc["value_sum"],
        status=doc["status"],
        reward=doc["reward"],
        labels=labels,
        consecutive_errors=doc["consecutive_errors"],
        timeout_poisoned=doc["timeout_poisoned"],
    )
    if node.parent is not None and messages:
        turn = parse_turn(messages[0].content)
        node.thought = turn.thought
        node.action_code = turn.code
        node.answer_text = turn.answer_text
        if len(messages) > 1:
            node.observation = strip_observation_text(messages[1].content)
    return node


def load_tree(document: dict) -> SearchTree:
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SnapshotVersionError(
            f"snapshot schema_version {version!r} != supported {SCHEMA_VERSION}"
        )
    config = SearchConfig(**document["config"])
    tree = SearchTree(
        task_id=document["task_id"],
        config=config,
        rng_seed=document["rng_seed"],
        iterations_done=document["iterations_done"],
    )
    for doc in document["nodes"]:
        node = _restore_node(doc)
        tree.nodes[node.id] = node
    for node_id in sorted(tree.nodes):
        node = tree.nodes[node_id]
        if node.parent is not None:
            tree.nodes[node.parent].children.append(node_id)
        if node.status == STATUS_ANSWER:
            tree.answer_node_ids.append(node_id)
    return tree


def save_tree(tree: SearchTree, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_snapshot(snapshot_tree(tree)), encoding="utf-8")
    tmp.replace(path)
    return path


def read_tree(path) -> SearchTree:
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    return load_tree(document)
