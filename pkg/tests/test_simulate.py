import dataclasses

import pytest

from cellsearch.gateway import SamplingParams
from cellsearch.protocol import parse_turn
from cellsearch.simulate import (
    DEFAULT_STRATEGIES,
    ScenarioPolicy,
    StrategyConfig,
    SyntheticScenario,
    accuracy_vs_iterations,
    build_scenario,
    metrics_table,
    oracle_value_estimator,
    run_experiment,
    run_scenario,
    scenario_task,
    write_metrics_jsonl,
)

ORACLE = StrategyConfig(name="oracle", c_puct=0.0, value_backend="oracle")
ZERO = StrategyConfig(name="zero", c_puct=0.0, value_backend="zero")


class TestBuildScenario:
    def test_depth_one_first_expansion_contains_answer(self):
        scenario = SyntheticScenario(branching=3, depth=1, policy_noise=0.0, seed=4)
        policy, _oracle, _executor, task = build_scenario(scenario)
        from cellsearch.protocol import render_task_prompt

        candidates = policy.generate_candidates(render_task_prompt(task), SamplingParams(n=3))
        kinds = [parse_turn(c.text).kind for c in candidates]
        assert "answer" in kinds

    def test_noise_one_never_answers(self):
        scenario = SyntheticScenario(branching=3, depth=3, policy_noise=1.0, seed=4)
        run, result = run_scenario(scenario, ORACLE, budget=15)
        assert not run.solved
        assert result.tree.answer_node_ids == []

    def test_oracle_scores_off_path_negative(self):
        scenario = SyntheticScenario(branching=3, depth=3, policy_noise=0.0, seed=4)
        oracle = oracle_value_estimator(scenario)
        wrong_choice = (scenario.correct_action_index[0] + 1) % scenario.branching
        from cellsearch.gateway import Message

        conv = [
            Message(role="user", content="task"),
            Message(
                role="assistant",
                content=f"Thought: t\nAction: ```python\nstep_0 = take_action({wrong_choice})\n```",
            ),
        ]
        assert oracle.estimate_value(conv) == -0.9
        good = [
            Message(role="user", content="task"),
            Message(
                role="assistant",
                content=(
                    "Thought: t\nAction: ```python\n"
                    f"step_0 = take_action({scenario.correct_action_index[0]})\n```"
                ),
            ),
        ]
        assert oracle.estimate_value(good) == 0.9

    def test_task_label_matches_answer(self):
        scenario = SyntheticScenario(seed=1)
        task = scenario_task(scenario)
        assert task.label == scenario.answer_label


class TestScenarioPolicyDeterminism:
    def test_pure_function_of_conversation(self):
        scenario = SyntheticScenario(branching=3, depth=4, policy_noise=0.5, seed=9)
        policy = ScenarioPolicy(scenario)
        from cellsearch.protocol import render_task_prompt

        conv = render_task_prompt(scenario_task(scenario))
        first = policy.generate_candidates(conv, SamplingParams(n=3))
        second = policy.generate_candidates(conv, SamplingParams(n=3))
        assert first == second

    def test_at_most_one_correct_candidate(self):
        scenario = SyntheticScenario(branching=3, depth=4, policy_noise=0.4, seed=2)
        policy = ScenarioPolicy(scenario)
        from cellsearch.protocol import render_task_prompt

        conv = render_task_prompt(scenario_task(scenario))
        for n in (1, 3, 5):
            candidates = policy.generate_candidates(conv, SamplingParams(n=n))
            correct = sum(
                1
                for c in candidates
                if f"take_action({scenario.correct_action_index[0]})" in c.text
            )
            assert correct == 1


class TestRunExperiment:
    def test_oracle_dominates_zero(self):
        scenario = SyntheticScenario(branching=3, depth=3, policy_noise=0.3)
        metrics = run_experiment(scenario, [ORACLE, ZERO], seeds=range(8), budget=15)
        assert metrics["oracle"].solve_rate == 1.0
        assert metrics["zero"].solve_rate <= metrics["oracle"].solve_rate

    def test_budget_zero_solves_nothing(self):
        scenario = SyntheticScenario(branching=3, depth=2, policy_noise=0.0)
        metrics = run_experiment(scenario, [ORACLE, ZERO], seeds=range(3), budget=0)
        assert all(m.solve_rate == 0.0 for m in metrics.values())

    def test_deterministic_given_seeds(self):
        scenario = SyntheticScenario(branching=3, depth=3, policy_noise=0.4)
        a = run_experiment(scenario, [ORACLE], seeds=range(5), budget=12)
        b = run_experiment(scenario, [ORACLE], seeds=range(5), budget=12)
        assert [r.to_dict() for r in a["oracle"].runs] == [r.to_dict() for r in b["oracle"].runs]

    def test_requires_inputs(self):
        with pytest.raises(ValueError):
            run_experiment(SyntheticScenario(), [], seeds=[1], budget=5)


class TestAccuracyVsIterations:
    def test_monotone_non_decreasing(self):
        scenarios = [SyntheticScenario(branching=3, depth=3, policy_noise=0.3, seed=s) for s in range(6)]
        curve = accuracy_vs_iterations(scenarios, ZERO, checkpoints=[3, 6, 12])
        rates = [rate for _c, rate in curve]
        assert rates == sorted(rates)

    def test_trivial_scenario_saturates_at_depth(self):
        scenarios = [SyntheticScenario(branching=2, depth=2, policy_noise=0.0, seed=s) for s in range(4)]
        curve = accuracy_vs_iterations(scenarios, ORACLE, checkpoints=[1, 2, 5])
        assert dict(curve)[1] == 0.0  # answer needs `depth` iterations
        assert dict(curve)[2] == 1.0
        assert dict(curve)[5] == 1.0

    def test_oracle_curve_dominates_zero_pointwise(self):
        scenarios = [SyntheticScenario(branching=3, depth=3, policy_noise=0.3, seed=s) for s in range(6)]
        checkpoints = [3, 6, 9, 15]
        oracle_curve = dict(accuracy_vs_iterations(scenarios, ORACLE, checkpoints))
        zero_curve = dict(accuracy_vs_iterations(scenarios, ZERO, checkpoints))
        assert all(oracle_curve[c] >= zero_curve[c] for c in checkpoints)

    def test_checkpoints_must_ascend(self):
        with pytest.raises(ValueError):
            accuracy_vs_iterations([SyntheticScenario()], ORACLE, checkpoints=[5, 2])


class TestReporting:
    def test_metrics_table_is_aligned_text(self):
        scenario = SyntheticScenario(branching=2, depth=2, policy_noise=0.0)
        metrics = run_experiment(scenario, [ORACLE], seeds=range(2), budget=5)
        table = metrics_table(metrics)
        lines = table.splitlines()
        assert lines[0].startswith("strategy")
        assert len(lines) == 2

    def test_jsonl_written(self, tmp_path):
        scenario = SyntheticScenario(branching=2, depth=2, policy_noise=0.0)
        metrics = run_experiment(scenario, [ORACLE, ZERO], seeds=range(2), budget=5)
        out = tmp_path / "metrics.jsonl"
        assert write_metrics_jsonl(metrics, out) == 2
        assert len(out.read_text(encoding="utf-8").splitlines()) == 2

    def test_default_strategies_cover_ablation_grid(self):
        names = {s.name for s in DEFAULT_STRATEGIES}
        assert len(names) == 4
        cells = {(s.c_puct > 0, s.value_backend) for s in DEFAULT_STRATEGIES}
        assert cells == {(False, "oracle"), (True, "oracle"), (False, "zero"), (True, "zero")}
