"""Synthetic search worlds with scripted policies, oracle value estimators,
and mock executors.

Each scenario hides exactly one correct action sequence.  The scripted
policy mixes correct continuations with distractors at a configurable noise
rate, the oracle value estimator scores on-path states +0.9 and off-path
states -0.9, and the mock executor replies with deterministic observations.
These worlds reproduce, at desk scale, the qualitative search trends:
value guidance beats no guidance, and the exploration term slows inference.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .engine import SELECT_MAJORITY, SearchEngine, SearchResult
from .executor import ExecutionResult, MockExecutor, STATUS_OK
from .gateway import FunctionValueEstimator, Message, PolicyCandidate, SamplingParams
from .grading import DEFAULT_TOLERANCE, grade_answer, majority_vote
from .protocol import TaskSpec, parse_answer_labels, parse_turn
from .tree import SearchConfig

ON_PATH_VALUE = 0.9
OFF_PATH_VALUE = -0.9


@dataclass(frozen=True)
class SyntheticScenario:
    """A hidden-sequence world.

    ``depth`` is the tree depth of the answer node on the correct path:
    levels 0..depth-2 take one correct code action each and the answer turn
    is emitted at level depth-1, so a run needs at least ``depth``
    iterations to solve.
    """

    branching: int = 3
    depth: int = 6
    correct_action_index: Tuple[int, ...] = ()
    answer_label: str = "@result[42]"
    policy_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.correct_action_index:
            rng = random.Random(self.seed ^ 0x5EED)
            object.__setattr__(
                self,
                "correct_action_index",
                tuple(rng.randrange(self.branching) for _ in range(self.depth - 1)),
            )
        if len(self.correct_action_index) != self.depth - 1:
            raise ValueError("correct_action_index needs one entry per code level (depth - 1)")
        if not 0.0 <= self.policy_noise <= 1.0:
            raise ValueError("policy_noise must be in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticScenario":
        return cls(
            branching=doc.get("branching", 3),
            depth=doc.get("depth", 6),
            correct_action_index=tuple(doc.get("correct_action_index", ())),
            answer_label=doc.get("answer_label", "@result[42]"),
            policy_noise=doc.get("policy_noise", 0.0),
            seed=doc.get("seed", 0),
        )


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    c_puct: float = 0.0
    value_backend: str = "oracle"  # "oracle" | "zero" | "noisy"
    noise_sigma: float = 0.3

    def __post_init__(self):
        if self.value_backend not in ("oracle", "zero", "noisy"):
            raise ValueError(f"unknown value backend {self.value_backend!r}")


def _action_code(level: int, choice: int) -> str:
    return f"step_{level} = take_action({choice})\nprint('level', {level}, 'choice', {choice})"


def _parse_choice(code: str) -> Optional[int]:
    marker = "take_action("
    start = code.find(marker)
    if start < 0:
        return None
    end = code.find(")", start)
    try:
        return int(code[start + len(marker) : end])
    except ValueError:
        return None


def _conversation_choices(messages: Sequence[Message]) -> List[int]:
    choices: List[int] = []
    for message in messages:
        if message.role != "assistant":
            continue
        turn = parse_turn(message.content)
        if turn.kind == "code" and turn.code is not None:
            choice = _parse_choice(turn.code)
            choices.append(choice if choice is not None else -1)
    return choices


def _rng_for(seed: int, tag: str, messages: Sequence[Message]) -> random.Random:
    h = hashlib.sha256()
    h.update(f"{seed}|{tag}".encode("utf-8"))
    for m in messages:
        h.update(m.role.encode("utf-8"))
        h.update(b"\x1f")
        h.update(m.content.encode("utf-8"))
        h.update(b"\x1e")
    return random.Random(int.from_bytes(h.digest()[:8], "big"))


class ScenarioPolicy:
    """Scripted sampler: a pure function of (scenario, conversation).

    At an on-path state each slot draws the correct continuation with
    probability ``1 - policy_noise``; the draws collapse to at most one
    correct candidate (extra hits become distractors), and while noise < 1
    one hit is forced so the hidden sequence stays reachable.  With noise 0
    the first slot is always the single correct candidate, so greedy
    value-guided descent follows the only positively-valued path.  Off-path
    states only ever draw distractors.  The correct continuation at the
    final level is the formatted answer; everywhere else it is the next
    correct action.
    """

    def __init__(self, scenario: SyntheticScenario):
        self.scenario = scenario

    def generate_candidates(
        self, messages: Sequence[Message], params: SamplingParams
    ) -> List[PolicyCandidate]:
        sc = self.scenario
        choices = _conversation_choices(messages)
        level = len(choices)
        code_levels = sc.depth - 1
        on_path = (
            level <= code_levels
            and tuple(choices) == sc.correct_action_index[:level]
        )
        rng = _rng_for(sc.seed, "policy", messages)
        correct_slot: Optional[int] = None
        if on_path:
            hits = [slot for slot in range(params.n) if rng.random() >= sc.policy_noise]
            if hits:
                correct_slot = hits[0]
            elif sc.policy_noise < 1.0:
                correct_slot = rng.randrange(params.n)
        texts: List[str] = []
        for slot in range(params.n):
            if slot == correct_slot:
                texts.append(self._correct_text(level))
            else:
                texts.append(self._distractor_text(rng, level, on_path))
        return [PolicyCandidate(text=t) for t in texts]

    def _correct_text(self, level: int) -> str:
        sc = self.scenario
        if level >= sc.depth - 1:
            return (
                "Thought: every step checks out, time to answer\n"
                f"Formatted answer: {sc.answer_label}"
            )
        choice = sc.correct_action_index[level]
        return (
            f"Thought: continue with step {level}\n"
            f"Action: ```python\n{_action_code(level, choice)}\n```"
        )

    def _distractor_text(self, rng: random.Random, level: int, on_path: bool) -> str:
        sc = self.scenario
        options = list(range(sc.branching))
        if on_path and level < sc.depth - 1:
            options.remove(sc.correct_action_index[level])
        choice = rng.choice(options)
        return (
            f"Thought: try a different step {level}\n"
            f"Action: ```python\n{_action_code(level, choice)}\n```"
        )


def oracle_value_estimator(scenario: SyntheticScenario) -> FunctionValueEstimator:
    def score(messages: Sequence[Message]) -> float:
        choices = _conversation_choices(messages)
        on_path = (
            len(choices) <= scenario.depth - 1
            and tuple(choices) == scenario.correct_action_index[: len(choices)]
        )
        return ON_PATH_VALUE if on_path else OFF_PATH_VALUE

    return FunctionValueEstimator(fn=score)


def noisy_value_estimator(
    scenario: SyntheticScenario, sigma: float
) -> FunctionValueEstimator:
    oracle = oracle_value_estimator(scenario)

    def score(messages: Sequence[Message]) -> float:
        rng = _rng_for(scenario.seed, "value-noise", messages)
        return oracle.fn(messages) + rng.gauss(0.0, sigma)

    return FunctionValueEstimator(fn=score)


def scenario_executor(scenario: SyntheticScenario) -> MockExecutor:
    def fallback(cells: Sequence[str]) -> ExecutionResult:
        choice = _parse_choice(cells[-1])
        return ExecutionResult(
            status=STATUS_OK,
            stdout=f"level {len(cells) - 1} choice {choice}\n",
        )

    return MockExecutor(fallback=fallback)


def scenario_task(scenario: SyntheticScenario) -> TaskSpec:
    return TaskSpec(
        task_id=f"synthetic-b{scenario.branching}-d{scenario.depth}-s{scenario.seed}",
        question=(
            "Recover the hidden action sequence by probing the environment "
            "one step at a time, then report the result."
        ),
        constraints="Take one action per turn until every level is resolved.",
        output_format=scenario.answer_label.split("[", 1)[0] + "[value]",
        label=scenario.answer_label,
    )


def build_scenario(scenario: SyntheticScenario):
    """(scripted policy, oracle value estimator, mock executor, task)."""
    return (
        ScenarioPolicy(scenario),
        oracle_value_estimator(scenario),
        scenario_executor(scenario),
        scenario_task(scenario),
    )


def _estimator_for(strategy: StrategyConfig, scenario: SyntheticScenario):
    if strategy.value_backend == "oracle":
        return oracle_value_estimator(scenario)
    if strategy.value_backend == "noisy":
        return noisy_value_estimator(scenario, strategy.noise_sigma)
    return None  # zero backend: default 0 is backpropagated


@dataclass
class ScenarioRun:
    strategy: str
    seed: int
    solved: bool
    first_correct_iteration: Optional[int]
    voting_correct: bool
    iterations_used: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_scenario(
    scenario: SyntheticScenario,
    strategy: StrategyConfig,
    budget: int,
    max_depth: int = 10,
) -> Tuple[ScenarioRun, SearchResult]:
    policy, _oracle, executor, task = build_scenario(scenario)
    config = SearchConfig.inference_defaults(
        c_puct=strategy.c_puct,
        max_iterations=budget,
        max_depth=max_depth,
        k_expansions=scenario.branching,
    )
    engine = SearchEngine(
        config=config,
        policy=policy,
        executor=executor,
        value_estimator=_estimator_for(strategy, scenario),
    )
    result = engine.run_search(task, rng_seed=scenario.seed, select=SELECT_MAJORITY)
    expected = parse_answer_labels(task.label)

    first_correct: Optional[int] = None
    for report in result.reports:
        for node_id in report.created_ids:
            node = result.tree.node(node_id)
            if node.status != "answer" or node.labels is None or not node.labels.entries:
                continue
            if grade_answer(expected, node.labels, DEFAULT_TOLERANCE):
                first_correct = report.index
                break
        if first_correct is not None:
            break

    voting_correct = result.final_labels is not None and grade_answer(
        expected, result.final_labels, DEFAULT_TOLERANCE
    )
    run = ScenarioRun(
        strategy=strategy.name,
        seed=scenario.seed,
        solved=first_correct is not None,
        first_correct_iteration=first_correct,
        voting_correct=voting_correct,
        iterations_used=result.tree.iterations_done,
    )
    return run, result


@dataclass
class StrategyMetrics:
    strategy: str
    runs: List[ScenarioRun] = field(default_factory=list)

    @property
    def solve_rate(self) -> float:
        if not self.runs:
            return 0.0
        return sum(r.solved for r in self.runs) / len(self.runs)

    @property
    def mean_iterations_to_solve(self) -> Optional[float]:
        solved = [r.first_correct_iteration for r in self.runs if r.solved]
        if not solved:
            return None
        return sum(solved) / len(solved)

    @property
    def voting_accuracy(self) -> float:
        if not self.runs:
            return 0.0
        return sum(r.voting_correct for r in self.runs) / len(self.runs)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_runs": len(self.runs),
            "solve_rate": self.solve_rate,
            "mean_iterations_to_solve": self.mean_iterations_to_solve,
            "voting_accuracy": self.voting_accuracy,
        }


def run_experiment(
    scenario: SyntheticScenario,
    strategies: Sequence[StrategyConfig],
    seeds: Sequence[int],
    budget: int,
    max_depth: int = 10,
) -> Dict[str, StrategyMetrics]:
    """Paired-seed comparison of strategies on one scenario family."""
    if not strategies or not seeds:
        raise ValueError("need at least one strategy and one seed")
    metrics = {s.name: StrategyMetrics(strategy=s.name) for s in strategies}
    for seed in seeds:
        world = dataclasses.replace(scenario, seed=seed)
        for strategy in strategies:
            run, _result = run_scenario(world, strategy, budget, max_depth=max_depth)
            metrics[strategy.name].runs.append(run)
    return metrics


def accuracy_vs_iterations(
    scenarios: Sequence[SyntheticScenario],
    strategy: StrategyConfig,
    checkpoints: Sequence[int],
    max_depth: int = 10,
) -> List[Tuple[int, float]]:
    """Cumulative solve rate at each iteration checkpoint (non-decreasing)."""
    if list(checkpoints) != sorted(checkpoints):
        raise ValueError("checkpoints must be ascending")
    budget = max(checkpoints) if checkpoints else 0
    firsts: List[Optional[int]] = []
    for scenario in scenarios:
        run, _result = run_scenario(scenario, strategy, budget, max_depth=max_depth)
        firsts.append(run.first_correct_iteration)
    curve: List[Tuple[int, float]] = []
    for checkpoint in checkpoints:
        solved = sum(1 for f in firsts if f is not None and f <= checkpoint)
        curve.append((checkpoint, solved / len(firsts) if firsts else 0.0))
    return curve


def metrics_table(metrics: Dict[str, StrategyMetrics]) -> str:
    """Aligned text table of the experiment metrics."""
    headers = ["strategy", "runs", "solve_rate", "mean_iters_to_solve", "voting_acc"]
    rows = []
    for name in metrics:
        m = metrics[name]
        mean = m.mean_iterations_to_solve
        rows.append(
            [
                name,
                str(len(m.runs)),
                f"{m.solve_rate:.2f}",
                "-" if mean is None else f"{mean:.2f}",
                f"{m.voting_accuracy:.2f}",
            ]
        )
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def write_metrics_jsonl(metrics: Dict[str, StrategyMetrics], path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for name in metrics:
            fh.write(json.dumps(metrics[name].to_dict(), ensure_ascii=True))
            fh.write("\n")
            count += 1
    return count


DEFAULT_STRATEGIES = (
    StrategyConfig(name="with-vm-no-explore", c_puct=0.0, value_backend="oracle"),
    StrategyConfig(name="with-vm-explore", c_puct=1.25, value_backend="oracle"),
    StrategyConfig(name="no-vm-no-explore", c_puct=0.0, value_backend="zero"),
    StrategyConfig(name="no-vm-explore", c_puct=1.25, value_backend="zero"),
)
