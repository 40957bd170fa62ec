"""Command-line interface: search / collect / extract / grade / simulate.

Flags override values from an optional JSON config file (--config).  Mock
backends are selected with the URL scheme ``mock:`` so smoke runs need no
services.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .engine import SELECT_MAJORITY, SearchEngine
from .executor import HttpExecutor, LocalExecutor, MockExecutor, SessionSpec
from .gateway import (
    HttpPolicyClient,
    HttpValueClient,
    ScriptedPolicy,
    ZeroValueEstimator,
)
from .grading import DEFAULT_TOLERANCE, Tolerance, grade_answer
from .orchestrator import load_tasks, resume_run, run_batch
from .persistence import read_tree
from .protocol import parse_answer_labels
from .simulate import (
    DEFAULT_STRATEGIES,
    StrategyConfig,
    SyntheticScenario,
    metrics_table,
    run_experiment,
    write_metrics_jsonl,
)
from .trajectories import (
    emit_training_records,
    enumerate_terminal_paths,
    sample_paths,
    write_dataset,
)
from .tree import SearchConfig

log = logging.getLogger(__name__)


def _mock_policy() -> ScriptedPolicy:
    def fallback(messages, params):
        return ["Thought: nothing to do\nFormatted answer: @status[done]"] * params.n

    return ScriptedPolicy(fallback=fallback)


def _build_policy(url: str, model: str):
    if url.startswith("mock:"):
        return _mock_policy()
    return HttpPolicyClient(url, model=model)


def _build_value(url: Optional[str]):
    if not url:
        return None
    if url.startswith("mock:"):
        return ZeroValueEstimator()
    return HttpValueClient(url)


def _build_executor(url: str, max_concurrent: int):
    if url.startswith("mock:"):
        return MockExecutor(max_concurrent_jobs=max_concurrent)
    if url == "local" or url.startswith("local:"):
        return LocalExecutor(max_concurrent_jobs=max_concurrent)
    return HttpExecutor(url, max_concurrent_jobs=max_concurrent)


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _merged(args: argparse.Namespace, file_config: dict, key: str, default):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in file_config:
        return file_config[key]
    return default


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tasks", required=True, help="JSONL task file")
    parser.add_argument("--out", required=True, help="output run directory")
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument(
        "--phase",
        choices=["collection", "inference"],
        default=None,
        help="override the phase implied by the subcommand",
    )
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--depth", type=int, default=None)
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--c-puct", type=float, default=None)
    parser.add_argument("--temperature", type=float, default=None)
    parser.add_argument("--top-p", type=float, default=None)
    parser.add_argument("--policy-url", default=None)
    parser.add_argument("--policy-model", default=None)
    parser.add_argument("--value-url", default=None)
    parser.add_argument("--executor-url", default=None)
    parser.add_argument("--parallel-trees", type=int, default=None)
    parser.add_argument("--max-concurrent-exec", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--tolerance-abs", type=float, default=None)
    parser.add_argument("--tolerance-rel", type=float, default=None)
    parser.add_argument("--select", choices=["majority", "value", "none"], default=None)
    parser.add_argument("--resume", action="store_true", help="resume the run in --out")


def _run_search_command(args: argparse.Namespace, phase: str) -> int:
    file_config = _load_config_file(args.config)
    phase = _merged(args, file_config, "phase", phase)
    defaults = (
        SearchConfig.collection_defaults()
        if phase == "collection"
        else SearchConfig.inference_defaults()
    )
    config = SearchConfig(
        phase=phase,
        c_puct=_merged(args, file_config, "c_puct", defaults.c_puct),
        max_iterations=_merged(args, file_config, "iters", defaults.max_iterations),
        max_depth=_merged(args, file_config, "depth", defaults.max_depth),
        k_expansions=_merged(args, file_config, "k", defaults.k_expansions),
        temperature=_merged(args, file_config, "temperature", defaults.temperature),
        top_p=_merged(args, file_config, "top_p", defaults.top_p),
    )
    tolerance = Tolerance(
        abs_tol=_merged(args, file_config, "tolerance_abs", DEFAULT_TOLERANCE.abs_tol),
        rel_tol=_merged(args, file_config, "tolerance_rel", DEFAULT_TOLERANCE.rel_tol),
    )
    policy_url = _merged(args, file_config, "policy_url", "mock:")
    policy_model = _merged(args, file_config, "policy_model", "default")
    value_url = _merged(args, file_config, "value_url", None)
    executor_url = _merged(args, file_config, "executor_url", "local")
    max_concurrent = _merged(args, file_config, "max_concurrent_exec", 40)
    parallel_trees = _merged(args, file_config, "parallel_trees", 4)
    master_seed = _merged(args, file_config, "seed", 0)
    select = _merged(args, file_config, "select", SELECT_MAJORITY)

    engine = SearchEngine(
        config=config,
        policy=_build_policy(policy_url, policy_model),
        executor=_build_executor(executor_url, max_concurrent),
        value_estimator=_build_value(value_url),
        tolerance=tolerance,
    )
    tasks = load_tasks(args.tasks)
    endpoints = {"policy": policy_url, "value": value_url or "", "executor": executor_url}
    if args.resume:
        manifest = resume_run(tasks, engine, args.out, parallel_trees=parallel_trees, select=select)
    else:
        manifest = run_batch(
            tasks,
            engine,
            args.out,
            master_seed=master_seed,
            parallel_trees=parallel_trees,
            select=select,
            endpoints=endpoints,
        )
    done = sum(1 for e in manifest.tasks.values() if e.status == "done")
    failed = sum(1 for e in manifest.tasks.values() if e.status == "failed")
    print(f"run {manifest.run_id}: {done} done, {failed} failed, out={args.out}")
    return 1 if failed else 0


def _cmd_search(args: argparse.Namespace) -> int:
    return _run_search_command(args, "inference")


def _cmd_collect(args: argparse.Namespace) -> int:
    return _run_search_command(args, "collection")


def _cmd_extract(args: argparse.Namespace) -> int:
    tree_files = sorted(Path(args.trees).glob("*.json"))
    if not tree_files:
        print(f"no tree snapshots under {args.trees}", file=sys.stderr)
        return 1
    all_records = []
    for tree_file in tree_files:
        tree = read_tree(tree_file)
        paths = enumerate_terminal_paths(tree)
        chosen = sample_paths(
            paths,
            max_correct=args.max_correct,
            max_incorrect=args.max_incorrect,
            seed=args.seed,
            reward_correct=tree.config.reward_correct,
        )
        all_records.extend(
            emit_training_records(tree, chosen, reward_correct=tree.config.reward_correct)
        )
    count = write_dataset(all_records, args.out)
    print(f"wrote {count} records from {len(tree_files)} trees to {args.out}")
    return 0


def _cmd_grade(args: argparse.Namespace) -> int:
    tolerance = Tolerance(abs_tol=args.tolerance_abs, rel_tol=args.tolerance_rel)
    total = 0
    correct = 0
    with Path(args.input).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            expected = parse_answer_labels(doc["label"])
            got = parse_answer_labels(doc.get("candidate", "") or "")
            verdict = bool(expected.entries) and grade_answer(expected, got, tolerance)
            total += 1
            correct += verdict
            print(json.dumps({"task_id": doc.get("task_id", f"line-{lineno}"), "correct": verdict}))
    accuracy = correct / total if total else 0.0
    print(f"Accuracy by Questions: {accuracy:.4f} ({correct}/{total})")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    if args.scenario:
        scenario = SyntheticScenario.from_dict(
            json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        )
    else:
        scenario = SyntheticScenario(
            branching=args.branching, depth=args.sim_depth, policy_noise=args.noise
        )
    strategies = list(DEFAULT_STRATEGIES)
    if args.strategies:
        wanted = set(args.strategies.split(","))
        strategies = [s for s in strategies if s.name in wanted]
        if not strategies:
            print(f"no known strategies among {sorted(wanted)}", file=sys.stderr)
            return 1
    metrics = run_experiment(
        scenario, strategies, seeds=range(args.n_seeds), budget=args.budget
    )
    print(metrics_table(metrics))
    if args.out:
        write_metrics_jsonl(metrics, args.out)
        print(f"metrics written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellsearch")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_search = sub.add_parser("search", help="inference-phase batch run")
    _add_run_flags(p_search)
    p_search.set_defaults(func=_cmd_search)

    p_collect = sub.add_parser("collect", help="trajectory-collection batch run")
    _add_run_flags(p_collect)
    p_collect.set_defaults(func=_cmd_collect)

    p_extract = sub.add_parser("extract", help="emit trajectory training JSONL from trees")
    p_extract.add_argument("--trees", required=True, help="directory of tree snapshots")
    p_extract.add_argument("--out", required=True, help="output JSONL path")
    p_extract.add_argument("--max-correct", type=int, default=4)
    p_extract.add_argument("--max-incorrect", type=int, default=4)
    p_extract.add_argument("--seed", type=int, default=0)
    p_extract.set_defaults(func=_cmd_extract)

    p_grade = sub.add_parser("grade", help="grade candidate answers against labels")
    p_grade.add_argument("--input", required=True, help="JSONL of {task_id,label,candidate}")
    p_grade.add_argument("--tolerance-abs", type=float, default=DEFAULT_TOLERANCE.abs_tol)
    p_grade.add_argument("--tolerance-rel", type=float, default=DEFAULT_TOLERANCE.rel_tol)
    p_grade.set_defaults(func=_cmd_grade)

    p_sim = sub.add_parser("simulate", help="run synthetic strategy comparisons")
    p_sim.add_argument("--scenario", help="scenario spec JSON file")
    p_sim.add_argument("--branching", type=int, default=3)
    p_sim.add_argument("--sim-depth", type=int, default=6)
    p_sim.add_argument("--noise", type=float, default=0.3)
    p_sim.add_argument("--n-seeds", type=int, default=50)
    p_sim.add_argument("--budget", type=int, default=40)
    p_sim.add_argument("--strategies", help="comma-separated strategy names")
    p_sim.add_argument("--out", help="metrics JSONL output path")
    p_sim.set_defaults(func=_cmd_simulate)

    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
