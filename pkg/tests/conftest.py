"""Shared test helpers: hand-built trees, randomized search worlds, and a
backpropagation ledger used to cross-check visit/value bookkeeping.
"""

from __future__ import annotations

import hashlib
import random
from typing import List, Optional, Sequence

import pytest

import cellsearch.engine as engine_mod
from cellsearch.engine import SearchEngine
from cellsearch.executor import ExecutionResult, MockExecutor, STATUS_ERROR, STATUS_OK, STATUS_TIMEOUT
from cellsearch.gateway import FunctionValueEstimator, Message, PolicyCandidate
from cellsearch.protocol import TaskSpec, TurnParse
from cellsearch.tree import SearchConfig, SearchTree, attach_child, backpropagate

PROMPT = [Message(role="user", content="Question: test\nConstraints: c\nFormat: f\nAvailable Local Files: (none)")]


def make_tree(config: Optional[SearchConfig] = None, task_id: str = "t0") -> SearchTree:
    config = config or SearchConfig()
    return SearchTree.create(task_id=task_id, config=config, root_messages=list(PROMPT))


def code_turn(code: str, thought: str = "step") -> TurnParse:
    return TurnParse(kind="code", thought=thought, code=code)


def add_code_child(tree: SearchTree, parent_id: int, code: str, prior: float = 1.0) -> int:
    return attach_child(tree, parent_id, code_turn(code), prior)


def _digest_rng(seed: int, tag: str, parts: Sequence[str]) -> random.Random:
    h = hashlib.sha256()
    h.update(f"{seed}|{tag}".encode())
    for p in parts:
        h.update(p.encode())
        h.update(b"\x1e")
    return random.Random(int.from_bytes(h.digest()[:8], "big"))


class RandomWorldPolicy:
    """Pure-in-conversation random mixture of code/answer/malformed turns."""

    def __init__(self, seed: int, p_code: float = 0.55, p_answer: float = 0.25):
        self.seed = seed
        self.p_code = p_code
        self.p_answer = p_answer

    def generate_candidates(self, messages, params) -> List[PolicyCandidate]:
        rng = _digest_rng(self.seed, "policy", [m.role + m.content for m in messages])
        texts = []
        for _ in range(params.n):
            r = rng.random()
            if r < self.p_code:
                texts.append(
                    f"Thought: step {rng.randrange(10_000)}\n"
                    f"Action: ```python\nv_{rng.randrange(50)} = {rng.randrange(9)}\n```"
                )
            elif r < self.p_code + self.p_answer:
                texts.append(
                    f"Thought: answering\nFormatted answer: @x[{rng.randrange(3)}]"
                )
            else:
                texts.append(f"free-form rambling {rng.randrange(10_000)}")
        return [PolicyCandidate(text=t) for t in texts]


def random_world_executor(seed: int, p_error: float = 0.2, p_timeout: float = 0.1) -> MockExecutor:
    def fallback(cells) -> ExecutionResult:
        rng = _digest_rng(seed, "exec", list(cells))
        r = rng.random()
        if r < p_timeout:
            return ExecutionResult(
                status=STATUS_TIMEOUT, stderr="TimeoutError: scripted", error_name="Timeout",
                duration=999.0,
            )
        if r < p_timeout + p_error:
            return ExecutionResult(
                status=STATUS_ERROR, stderr="RuntimeError: scripted failure",
                error_name="RuntimeError",
            )
        return ExecutionResult(status=STATUS_OK, stdout=f"out {rng.randrange(10_000)}\n")

    return MockExecutor(fallback=fallback)


def pseudo_value_estimator(seed: int) -> FunctionValueEstimator:
    def score(messages) -> float:
        rng = _digest_rng(seed, "value", [m.content for m in messages])
        return rng.uniform(-1.0, 1.0)

    return FunctionValueEstimator(fn=score)


def random_search_engine(seed: int) -> tuple:
    """A randomized (engine, task) pair; everything deterministic in seed."""
    rng = random.Random(seed)
    config = SearchConfig(
        phase=rng.choice(["collection", "inference"]),
        c_puct=rng.choice([0.0, 1.25]),
        max_iterations=rng.randrange(5, 26),
        max_depth=rng.randrange(2, 6),
        k_expansions=rng.randrange(1, 5),
        max_consecutive_errors=rng.randrange(2, 4),
        error_budget_mode=rng.choice(["consecutive", "total"]),
        prior_mode="uniform",
    )
    estimator = pseudo_value_estimator(seed) if rng.random() < 0.5 else None
    engine = SearchEngine(
        config=config,
        policy=RandomWorldPolicy(seed),
        executor=random_world_executor(seed),
        value_estimator=estimator,
    )
    task = TaskSpec(task_id=f"rand-{seed}", question="q", constraints="c",
                    output_format="@x[value]", label="@x[1]")
    return engine, task


class BackpropLedger:
    """Records every backpropagate call so totals can be recomputed independently."""

    def __init__(self):
        self.events: List[tuple] = []

    def install(self, monkeypatch) -> None:
        import cellsearch.tree as tree_mod

        real = tree_mod.backpropagate  # the unwrapped original, so installs never chain

        def recording(tree, node_id, value):
            self.events.append((node_id, value))
            real(tree, node_id, value)

        monkeypatch.setattr(engine_mod, "backpropagate", recording)

    def subtree_totals(self, tree: SearchTree, node_id: int) -> tuple:
        member = set()
        stack = [node_id]
        while stack:
            nid = stack.pop()
            member.add(nid)
            stack.extend(tree.node(nid).children)
        visits = 0
        total = 0.0
        for target, value in self.events:
            if target in member:
                visits += 1
                total += value
        return visits, total


@pytest.fixture
def ledger(monkeypatch) -> BackpropLedger:
    led = BackpropLedger()
    led.install(monkeypatch)
    return led
