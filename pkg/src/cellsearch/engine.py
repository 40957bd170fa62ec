"""The search loop: one engine drives one tree through select / expand /
evaluate / backpropagate iterations against a policy, an executor, and an
optional value estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

from .executor import (
    Executor,
    SessionSpec,
    STATUS_TIMEOUT,
    execute_node_path,
    format_observation,
)
from .gateway import (
    Message,
    PolicyCandidate,
    PolicyClient,
    SamplingParams,
    ValueEstimator,
    clamp_value,
    conversation_tokens,
)
from .grading import (
    DEFAULT_TOLERANCE,
    NoCandidates,
    Tolerance,
    canonical_label_key,
    grade_answer,
    majority_vote,
    select_by_value,
)
from .protocol import (
    AnswerLabels,
    TaskSpec,
    assemble_conversation,
    parse_answer_labels,
    parse_turn,
    render_observation_text,
    render_task_prompt,
)
from .tree import (
    PHASE_COLLECTION,
    STATUS_ANSWER,
    STATUS_ERROR,
    SearchConfig,
    SearchTree,
    SelectionExhausted,
    attach_child,
    backpropagate,
    mark_terminal,
    path_error_count,
    select_node,
    terminal_revisit_value,
)

log = logging.getLogger(__name__)

SELECT_MAJORITY = "majority"
SELECT_VALUE = "value"
SELECT_NONE = "none"


@dataclass
class IterationReport:
    index: int
    selected_id: int
    created_ids: List[int] = field(default_factory=list)
    terminal_events: List[Tuple[int, str, float]] = field(default_factory=list)
    revisit: bool = False
    token_limit_hit: bool = False


@dataclass
class SearchResult:
    tree: SearchTree
    answer_node_ids: List[int]
    final_labels: Optional[AnswerLabels]
    reports: List[IterationReport]
    stop_reason: str  # "budget" | "exhausted" | "early_stop"


def answer_candidates(tree: SearchTree) -> List[Tuple[AnswerLabels, float, int]]:
    """(labels, value estimate, discovery index) for every answer node."""
    out = []
    for discovery, node_id in enumerate(tree.answer_node_ids):
        node = tree.node(node_id)
        out.append((node.labels or AnswerLabels(), node.q_value(), discovery))
    return out


class SearchEngine:
    """Runs the search loop for one task at a time.

    The engine owns no tree state; trees are passed in, so a tree loaded from
    a snapshot continues exactly where it stopped.
    """

    def __init__(
        self,
        config: SearchConfig,
        policy: PolicyClient,
        executor: Executor,
        value_estimator: Optional[ValueEstimator] = None,
        tolerance: Tolerance = DEFAULT_TOLERANCE,
        session_spec: Optional[SessionSpec] = None,
        token_counter: Optional[Callable[[str], int]] = None,
    ):
        self.config = config
        self.policy = policy
        self.executor = executor
        self.value_estimator = value_estimator
        self.tolerance = tolerance
        self.session_spec = session_spec
        self.token_counter = token_counter

    # -- helpers ---------------------------------------------------------

    def _session_spec_for(self, task: TaskSpec) -> SessionSpec:
        if self.session_spec is not None:
            return self.session_spec
        return SessionSpec(data_dir=task.data_dir)

    def _expected_labels(self, task: TaskSpec) -> Optional[AnswerLabels]:
        if not task.label:
            return None
        labels = parse_answer_labels(task.label)
        return labels if labels.entries else None

    def _estimate(self, conversation: Sequence[Message]) -> float:
        if self.value_estimator is None:
            return self.config.default_backprop_value
        return clamp_value(self.value_estimator.estimate_value(conversation))

    def _priors(self, candidates: Sequence[PolicyCandidate]) -> List[float]:
        k = len(candidates)
        if self.config.prior_mode == "logprob":
            logprobs = [c.mean_logprob for c in candidates]
            if all(lp is not None for lp in logprobs):
                peak = max(logprobs)
                weights = [math.exp(lp - peak) for lp in logprobs]
                total = sum(weights)
                return [w / total for w in weights]
            log.debug("logprob priors requested but logprobs missing; using uniform")
        return [1.0 / k] * k

    def _error_budget_exceeded(self, tree: SearchTree, child_id: int) -> bool:
        child = tree.node(child_id)
        if self.config.error_budget_mode == "total":
            return path_error_count(tree, child_id) >= self.config.max_consecutive_errors
        return child.consecutive_errors >= self.config.max_consecutive_errors

    # -- the iteration ---------------------------------------------------

    def run_iteration(self, tree: SearchTree, task: TaskSpec) -> IterationReport:
        """One select/expand/evaluate/backpropagate step.

        Raises ``SelectionExhausted`` when nothing remains selectable.
        Service failures propagate without counting the iteration.
        """
        if tree.iterations_done >= self.config.max_iterations:
            raise ValueError("iteration budget already spent")
        selected_id = select_node(tree)
        node = tree.node(selected_id)
        index = tree.iterations_done + 1
        report = IterationReport(index=index, selected_id=selected_id)

        if node.terminal:
            value = terminal_revisit_value(node)
            backpropagate(tree, selected_id, value)
            tree.iterations_done += 1
            report.revisit = True
            report.terminal_events.append((selected_id, node.status, value))
            return report

        conversation = assemble_conversation(tree, selected_id)
        if conversation_tokens(conversation, self.token_counter) > self.config.max_input_tokens:
            mark_terminal(tree, selected_id, STATUS_ERROR, self.config.reward_failure)
            backpropagate(tree, selected_id, self.config.reward_failure)
            tree.iterations_done += 1
            report.token_limit_hit = True
            report.terminal_events.append(
                (selected_id, STATUS_ERROR, self.config.reward_failure)
            )
            return report

        params = SamplingParams(
            temperature=self.config.temperature,
            top_p=self.config.top_p,
            max_output_tokens=self.config.max_output_tokens,
            n=self.config.k_expansions,
        )
        candidates = self.policy.generate_candidates(conversation, params)
        priors = self._priors(candidates)
        expected = self._expected_labels(task)
        spec = self._session_spec_for(task)

        for candidate, prior in zip(candidates, priors):
            turn = parse_turn(candidate.text)
            child_id = attach_child(tree, selected_id, turn, prior)
            report.created_ids.append(child_id)
            child = tree.node(child_id)

            if turn.kind == "malformed":
                mark_terminal(tree, child_id, STATUS_ERROR, self.config.reward_failure)
                backpropagate(tree, child_id, self.config.reward_failure)
                report.terminal_events.append(
                    (child_id, STATUS_ERROR, self.config.reward_failure)
                )
                continue

            if turn.kind == "answer":
                labels = parse_answer_labels(turn.answer_text or "")
                if self.config.phase == PHASE_COLLECTION:
                    correct = expected is not None and grade_answer(
                        expected, labels, self.tolerance
                    )
                    reward = (
                        self.config.reward_correct if correct else self.config.reward_failure
                    )
                    mark_terminal(tree, child_id, STATUS_ANSWER, reward, labels)
                    backpropagate(tree, child_id, reward)
                    report.terminal_events.append((child_id, STATUS_ANSWER, reward))
                else:
                    mark_terminal(tree, child_id, STATUS_ANSWER, None, labels)
                    value = self._estimate(assemble_conversation(tree, child_id))
                    backpropagate(tree, child_id, value)
                    report.terminal_events.append((child_id, STATUS_ANSWER, value))
                continue

            # Code turn: rebuild the notebook state and run the new cell.
            result = execute_node_path(self.executor, spec, tree, selected_id, turn.code)
            observation = format_observation(result)
            child.observation = observation
            child.messages.append(
                Message(role="user", content=render_observation_text(observation))
            )
            if result.status == STATUS_TIMEOUT:
                child.timeout_poisoned = True
            child.consecutive_errors = (
                node.consecutive_errors + 1 if not result.ok else 0
            )

            if self._error_budget_exceeded(tree, child_id) or child.depth >= self.config.max_depth:
                mark_terminal(tree, child_id, STATUS_ERROR, self.config.reward_failure)
                backpropagate(tree, child_id, self.config.reward_failure)
                report.terminal_events.append(
                    (child_id, STATUS_ERROR, self.config.reward_failure)
                )
            else:
                value = self._estimate(assemble_conversation(tree, child_id))
                backpropagate(tree, child_id, value)

        tree.iterations_done += 1
        return report

    # -- the loop --------------------------------------------------------

    def new_tree(self, task: TaskSpec, rng_seed: int = 0) -> SearchTree:
        return SearchTree.create(
            task_id=task.task_id,
            config=self.config,
            root_messages=render_task_prompt(task),
            rng_seed=rng_seed,
        )

    def run_search(
        self, task: TaskSpec, rng_seed: int = 0, select: str = SELECT_MAJORITY
    ) -> SearchResult:
        tree = self.new_tree(task, rng_seed)
        return self.continue_search(tree, task, select=select)

    def continue_search(
        self, tree: SearchTree, task: TaskSpec, select: str = SELECT_MAJORITY
    ) -> SearchResult:
        reports: List[IterationReport] = []
        stop_reason = "budget"
        while tree.iterations_done < self.config.max_iterations:
            try:
                reports.append(self.run_iteration(tree, task))
            except SelectionExhausted:
                stop_reason = "exhausted"
                break
            if self._should_stop_early(tree):
                stop_reason = "early_stop"
                break
        final = self._finalize(tree, select)
        return SearchResult(
            tree=tree,
            answer_node_ids=list(tree.answer_node_ids),
            final_labels=final,
            reports=reports,
            stop_reason=stop_reason,
        )

    def _should_stop_early(self, tree: SearchTree) -> bool:
        needed = self.config.early_stop_agreement
        if not needed or not tree.answer_node_ids:
            return False
        counts: dict = {}
        for labels, _value, _discovery in answer_candidates(tree):
            key = canonical_label_key(labels)
            counts[key] = counts.get(key, 0) + 1
        return max(counts.values()) >= needed

    def _finalize(self, tree: SearchTree, select: str) -> Optional[AnswerLabels]:
        if select == SELECT_NONE:
            return None
        candidates = answer_candidates(tree)
        if not candidates:
            return None
        if select == SELECT_VALUE:
            return select_by_value(candidates)
        if select == SELECT_MAJORITY:
            return majority_vote(candidates)
        raise ValueError(f"unknown answer selection mode {select!r}")
