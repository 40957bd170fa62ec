"""Search-tree data structures and the PUCT primitives.

A tree holds one task's notebook states.  Every node carries its own message
contribution (the root carries the rendered task prompt; children carry their
assistant turn plus an observation when the cell was executed) and the PUCT
statistics: prior, visit count, and value sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .gateway import Message
from .protocol import AnswerLabels, TurnParse, render_assistant_text

STATUS_OPEN = "open"
STATUS_ANSWER = "answer"
STATUS_ERROR = "error"

PHASE_COLLECTION = "collection"
PHASE_INFERENCE = "inference"


class UnknownNode(KeyError):
    pass


class ParentTerminal(ValueError):
    pass


class DepthExceeded(ValueError):
    pass


class SelectionExhausted(RuntimeError):
    """Every remaining leaf is terminal and has used up its re-visit budget."""


@dataclass
class SearchConfig:
    phase: str = PHASE_INFERENCE
    c_puct: float = 0.0
    max_iterations: int = 40
    max_depth: int = 10
    k_expansions: int = 3
    max_consecutive_errors: int = 3
    error_budget_mode: str = "consecutive"  # or "total"
    max_input_tokens: int = 100_000
    prior_mode: str = "uniform"  # or "logprob"
    reward_correct: float = 1.0
    reward_failure: float = -1.0
    default_backprop_value: float = 0.0
    temperature: float = 0.7
    top_p: float = 0.95
    max_output_tokens: int = 8192
    terminal_revisit_limit: int = 2
    early_stop_agreement: Optional[int] = None

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.k_expansions < 1:
            raise ValueError("k_expansions must be >= 1")
        if self.c_puct < 0:
            raise ValueError("c_puct must be >= 0")
        if self.phase not in (PHASE_COLLECTION, PHASE_INFERENCE):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.error_budget_mode not in ("consecutive", "total"):
            raise ValueError(f"unknown error_budget_mode {self.error_budget_mode!r}")
        if self.prior_mode not in ("uniform", "logprob"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")

    @classmethod
    def collection_defaults(cls, **overrides) -> "SearchConfig":
        base = dict(
            phase=PHASE_COLLECTION,
            c_puct=1.25,
            max_iterations=50,
            max_depth=10,
            k_expansions=3,
            temperature=1.0,
            top_p=0.95,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def inference_defaults(cls, **overrides) -> "SearchConfig":
        base = dict(
            phase=PHASE_INFERENCE,
            c_puct=0.0,
            max_iterations=40,
            max_depth=10,
            k_expansions=3,
            temperature=0.7,
            top_p=0.95,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class SearchNode:
    id: int
    parent: Optional[int]
    depth: int
    messages: List[Message] = field(default_factory=list)
    thought: str = ""
    action_code: Optional[str] = None
    answer_text: Optional[str] = None
    observation: Optional[str] = None
    prior: float = 1.0
    visit_count: int = 0
    value_sum: float = 0.0
    status: str = STATUS_OPEN
    reward: Optional[float] = None
    labels: Optional[AnswerLabels] = None
    consecutive_errors: int = 0
    timeout_poisoned: bool = False
    children: List[int] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return self.status != STATUS_OPEN

    def q_value(self) -> float:
        if self.visit_count <= 0:
            raise ValueError(f"Q undefined for unvisited node {self.id}")
        return self.value_sum / self.visit_count


@dataclass
class SearchTree:
    task_id: str
    config: SearchConfig
    rng_seed: int = 0
    nodes: Dict[int, SearchNode] = field(default_factory=dict)
    root_id: int = 0
    iterations_done: int = 0
    answer_node_ids: List[int] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        task_id: str,
        config: SearchConfig,
        root_messages: List[Message],
        rng_seed: int = 0,
    ) -> "SearchTree":
        tree = cls(task_id=task_id, config=config, rng_seed=rng_seed)
        tree.nodes[0] = SearchNode(id=0, parent=None, depth=0, messages=list(root_messages))
        return tree

    def node(self, node_id: int) -> SearchNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    @property
    def root(self) -> SearchNode:
        return self.node(self.root_id)

    def next_id(self) -> int:
        return max(self.nodes) + 1 if self.nodes else 0

    def path_to(self, node_id: int) -> List[SearchNode]:
        node = self.node(node_id)
        path = [node]
        while node.parent is not None:
            node = self.node(node.parent)
            path.append(node)
        path.reverse()
        return path

    def open_leaf_exists(self) -> bool:
        return any(not n.children and not n.terminal for n in self.nodes.values())


def puct_score(
    q: float, prior: float, parent_visits: int, visits: int, c_puct: float
) -> float:
    """PUCT(s') = Q + c_puct * P * sqrt(N_parent) / (1 + N)."""
    return q + c_puct * prior * math.sqrt(parent_visits) / (1.0 + visits)


def _child_score(tree: SearchTree, parent: SearchNode, child: SearchNode) -> float:
    q = child.value_sum / child.visit_count if child.visit_count > 0 else 0.0
    return puct_score(q, child.prior, parent.visit_count, child.visit_count, tree.config.c_puct)


def _revisits_spent(node: SearchNode) -> int:
    # Terminal nodes are backpropagated exactly once at creation; every
    # additional visit is a re-visit by descent.
    return max(0, node.visit_count - 1)


def _exhausted(tree: SearchTree, node: SearchNode, memo: Dict[int, bool]) -> bool:
    cached = memo.get(node.id)
    if cached is not None:
        return cached
    if node.terminal:
        out = _revisits_spent(node) >= tree.config.terminal_revisit_limit
    elif node.children:
        out = all(_exhausted(tree, tree.node(c), memo) for c in node.children)
    else:
        out = False
    memo[node.id] = out
    return out


def select_node(tree: SearchTree) -> int:
    """Descend from the root by maximal PUCT (ties to the lowest node id).

    Terminal leaves whose re-visit budget is spent are excluded from descent,
    as are internal nodes whose whole subtree is spent.  Returns the id of the
    childless node where descent stops; raises ``SelectionExhausted`` when no
    selectable node remains.
    """
    memo: Dict[int, bool] = {}
    node = tree.root
    if _exhausted(tree, node, memo):
        raise SelectionExhausted(f"tree {tree.task_id} has no expandable or revisitable node")
    while node.children:
        best: Optional[SearchNode] = None
        best_score = -math.inf
        for child_id in node.children:
            child = tree.node(child_id)
            if _exhausted(tree, child, memo):
                continue
            score = _child_score(tree, node, child)
            if score > best_score:
                best = child
                best_score = score
        assert best is not None  # node not exhausted => some child selectable
        node = best
    return node.id


def backpropagate(tree: SearchTree, node_id: int, value: float) -> None:
    """Add one visit and ``value`` to the node and every ancestor up to the root."""
    node = tree.node(node_id)
    while True:
        node.visit_count += 1
        node.value_sum += value
        if node.parent is None:
            break
        node = tree.node(node.parent)


def attach_child(
    tree: SearchTree, parent_id: int, turn: TurnParse, prior: float
) -> int:
    """Create an open child for a parsed turn; ids are assigned sequentially."""
    parent = tree.node(parent_id)
    if parent.terminal:
        raise ParentTerminal(f"node {parent_id} is terminal")
    if parent.depth >= tree.config.max_depth:
        raise DepthExceeded(f"node {parent_id} at depth {parent.depth}")
    node_id = tree.next_id()
    child = SearchNode(
        id=node_id,
        parent=parent_id,
        depth=parent.depth + 1,
        messages=[Message(role="assistant", content=render_assistant_text(turn))],
        thought=turn.thought,
        action_code=turn.code,
        answer_text=turn.answer_text,
        prior=prior,
        consecutive_errors=parent.consecutive_errors,
    )
    tree.nodes[node_id] = child
    parent.children.append(node_id)
    return node_id


def mark_terminal(
    tree: SearchTree,
    node_id: int,
    status: str,
    reward: Optional[float],
    labels: Optional[AnswerLabels] = None,
) -> None:
    node = tree.node(node_id)
    if node.children:
        raise ValueError(f"cannot terminate expanded node {node_id}")
    node.status = status
    node.reward = reward
    if status == STATUS_ANSWER:
        node.labels = labels if labels is not None else AnswerLabels()
        tree.answer_node_ids.append(node_id)


def terminal_revisit_value(node: SearchNode) -> float:
    """Value re-backpropagated when descent lands on a terminal node again.

    Graded/errored nodes re-send their stored reward; ungraded answer nodes
    (inference phase) re-send the value they were created with, which equals
    their Q since every backprop into them used that same value.
    """
    if node.reward is not None:
        return node.reward
    return node.q_value()


def path_error_count(tree: SearchTree, node_id: int) -> int:
    """Number of erroring executed cells on the root-to-node path.

    A node's cell errored iff its consecutive counter is one above its
    parent's (success resets the counter to zero).
    """
    count = 0
    for node in tree.path_to(node_id):
        if node.parent is None or node.action_code is None:
            continue
        parent = tree.node(node.parent)
        if node.consecutive_errors == parent.consecutive_errors + 1:
            count += 1
    return count
