"""The fixed scripted world behind the checked-in golden snapshot.

Everything here is a pure function of the conversation, so the end-to-end
run is byte-reproducible on any platform.
"""

from __future__ import annotations

from cellsearch.engine import SearchEngine, SearchResult
from cellsearch.executor import ExecutionResult, MockExecutor, SessionSpec
from cellsearch.gateway import ScriptedPolicy, ZeroValueEstimator
from cellsearch.protocol import TaskSpec
from cellsearch.tree import SearchConfig

GOLDEN_SEED = 20240601

GOLDEN_TASK = TaskSpec(
    task_id="golden-001",
    question="Compute the mean of the value column of table.csv.",
    constraints="Round the mean to one decimal place.",
    output_format="@mean value[mean]",
    file_names=("table.csv",),
    label="@mean value[12.4]",
)

_TURNS_BY_DEPTH = {
    0: [
        "Thought: inspect the table first\nAction: ```python\nrows = read_table('table.csv')\nprint(rows[:3])\n```",
        "Thought: check the column names\nAction: ```python\nprint(columns('table.csv'))\n```",
        "the assistant mumbles something unusable",
    ],
    1: [
        "Thought: compute the mean\nAction: ```python\nprint(mean_of(rows, 'value'))\n```",
        "Thought: the mean is 12.4\nFormatted answer: @mean value[12.4]",
        "Thought: the mean is 12.4\nFormatted answer: @mean value[12.4]",
    ],
}

_FINAL_TURNS = [
    "Thought: confirmed\nFormatted answer: @mean value[12.4]",
    "Thought: double-checking\nFormatted answer: @mean value[12.40]",
    "Thought: one more look\nAction: ```python\nprint('done')\n```",
]


def golden_policy() -> ScriptedPolicy:
    def fallback(messages, params):
        depth = sum(1 for m in messages if m.role == "assistant")
        return list(_TURNS_BY_DEPTH.get(depth, _FINAL_TURNS))[: params.n]

    return ScriptedPolicy(fallback=fallback)


def golden_executor() -> MockExecutor:
    def fallback(cells):
        return ExecutionResult(status="ok", stdout=f"table[{len(cells)}]: 12.4\n")

    return MockExecutor(fallback=fallback)


def golden_engine() -> SearchEngine:
    config = SearchConfig.inference_defaults(max_iterations=12, k_expansions=3)
    return SearchEngine(
        config=config,
        policy=golden_policy(),
        executor=golden_executor(),
        value_estimator=ZeroValueEstimator(),
        session_spec=SessionSpec(),
    )


def run_golden() -> SearchResult:
    return golden_engine().run_search(GOLDEN_TASK, rng_seed=GOLDEN_SEED)
