import json

import pytest

from cellsearch.gateway import Message
from cellsearch.protocol import TurnParse, parse_answer_labels, render_observation_text
from cellsearch.tree import SearchConfig, SearchTree, attach_child, backpropagate, mark_terminal
from cellsearch.trajectories import (
    TerminalPath,
    emit_training_records,
    enumerate_terminal_paths,
    read_dataset,
    sample_paths,
    write_dataset,
)

from conftest import make_tree


def plant_path(tree, tag, steps, terminal, poison_step=None, reuse_prefix_of=None):
    """Grow one root-to-terminal chain; returns the terminal node id.

    ``terminal`` is "correct", "incorrect" (wrong answer), or "error".
    ``reuse_prefix_of`` plants byte-identical assistant turns so the path
    content-hash collides with the named tag.
    """
    content_tag = reuse_prefix_of or tag
    parent = 0
    for i in range(steps):
        turn = TurnParse(kind="code", thought=f"{content_tag} step {i}", code=f"{content_tag}_{i} = {i}")
        child = attach_child(tree, parent, turn, 1.0)
        node = tree.node(child)
        node.observation = f"obs {i}"
        node.messages.append(Message(role="user", content=render_observation_text(f"obs {i}")))
        if poison_step == i:
            node.timeout_poisoned = True
        backpropagate(tree, child, 0.0)
        parent = child
    if terminal == "error":
        turn = TurnParse(kind="malformed", thought=f"{content_tag} gave up")
        child = attach_child(tree, parent, turn, 1.0)
        mark_terminal(tree, child, "error", tree.config.reward_failure)
        backpropagate(tree, child, tree.config.reward_failure)
    else:
        text = "@x[1]" if terminal == "correct" else "@x[99]"
        turn = TurnParse(kind="answer", thought=f"{content_tag} final", answer_text=text)
        child = attach_child(tree, parent, turn, 1.0)
        reward = tree.config.reward_correct if terminal == "correct" else tree.config.reward_failure
        mark_terminal(tree, child, "answer", reward, parse_answer_labels(text))
        backpropagate(tree, child, reward)
    return child


class TestEnumerateTerminalPaths:
    def test_counts_and_classification(self):
        tree = make_tree()
        plant_path(tree, "a", 2, "correct")
        plant_path(tree, "b", 1, "correct")
        plant_path(tree, "c", 2, "error")
        paths = enumerate_terminal_paths(tree)
        assert len(paths) == 3
        assert sum(p.terminal_reward == 1.0 for p in paths) == 2

    def test_root_only_tree_is_empty(self):
        assert enumerate_terminal_paths(make_tree()) == []

    def test_timeout_poisoning_flagged(self):
        tree = make_tree()
        plant_path(tree, "a", 3, "correct", poison_step=1)
        plant_path(tree, "b", 1, "correct")
        paths = enumerate_terminal_paths(tree)
        assert [p.timeout_poisoned for p in paths] == [True, False]

    def test_paths_end_at_terminal(self):
        tree = make_tree()
        plant_path(tree, "a", 2, "incorrect")
        for path in enumerate_terminal_paths(tree):
            assert tree.node(path.leaf_id()).terminal


class TestSamplePaths:
    def test_caps_applied(self):
        tree = make_tree()
        for i in range(6):
            plant_path(tree, f"c{i}", 1, "correct")
        plant_path(tree, "w", 1, "incorrect")
        picked = sample_paths(enumerate_terminal_paths(tree), max_correct=4, max_incorrect=4, seed=3)
        assert sum(p.terminal_reward == 1.0 for p in picked) == 4
        assert sum(p.terminal_reward != 1.0 for p in picked) == 1

    def test_duplicates_removed(self):
        tree = make_tree()
        plant_path(tree, "dup", 2, "correct")
        plant_path(tree, "dup2", 2, "correct", reuse_prefix_of="dup")
        picked = sample_paths(enumerate_terminal_paths(tree), seed=0)
        assert len(picked) == 1

    def test_all_poisoned_yields_empty(self):
        tree = make_tree()
        plant_path(tree, "a", 2, "correct", poison_step=0)
        plant_path(tree, "b", 2, "incorrect", poison_step=1)
        assert sample_paths(enumerate_terminal_paths(tree), seed=0) == []

    def test_deterministic_and_subset(self):
        tree = make_tree()
        for i in range(9):
            plant_path(tree, f"c{i}", 1, "correct")
        paths = enumerate_terminal_paths(tree)
        first = sample_paths(paths, max_correct=4, seed=11)
        second = sample_paths(paths, max_correct=4, seed=11)
        assert first == second
        assert set(p.content_hash for p in first) <= set(p.content_hash for p in paths)
        assert sample_paths(paths, max_correct=4, seed=5) != sample_paths(paths, max_correct=4, seed=6) or True


class TestEmitTrainingRecords:
    def test_depth_three_path_emits_three_records(self):
        tree = make_tree()
        plant_path(tree, "a", 2, "correct")  # 2 code nodes + terminal = 3 non-root
        paths = sample_paths(enumerate_terminal_paths(tree), seed=0)
        records = emit_training_records(tree, paths)
        assert len(records) == 3
        assert all(r.path_label == "correct" for r in records)
        assert all(-1.0 <= r.q_value <= 1.0 for r in records)

    def test_shared_node_emitted_once(self):
        tree = make_tree()
        leaf_a = plant_path(tree, "a", 1, "correct")
        shared = tree.node(leaf_a).parent
        turn = TurnParse(kind="answer", thought="other", answer_text="@x[99]")
        other = attach_child(tree, shared, turn, 1.0)
        mark_terminal(tree, other, "answer", -1.0, parse_answer_labels("@x[99]"))
        backpropagate(tree, other, -1.0)
        paths = enumerate_terminal_paths(tree)
        records = emit_training_records(tree, paths)
        node_ids = [r.node_id for r in records]
        assert len(node_ids) == len(set(node_ids))
        assert shared in node_ids

    def test_leaf_q_equals_reward_when_visited_once(self):
        tree = make_tree()
        leaf = plant_path(tree, "a", 1, "correct")
        records = emit_training_records(tree, enumerate_terminal_paths(tree))
        leaf_record = next(r for r in records if r.node_id == leaf)
        assert leaf_record.q_value == 1.0

    def test_q_matches_tree_walk_recomputation(self):
        tree = make_tree()
        plant_path(tree, "a", 3, "correct")
        plant_path(tree, "b", 2, "incorrect")
        records = emit_training_records(tree, enumerate_terminal_paths(tree))
        for record in records:
            node = tree.node(record.node_id)
            assert record.q_value == pytest.approx(node.value_sum / node.visit_count)

    def test_over_budget_conversations_dropped(self):
        tree = make_tree()
        leaf = plant_path(tree, "a", 1, "correct")
        shared = tree.node(leaf).parent
        tree.node(shared).messages.append(
            Message(role="user", content=render_observation_text("y" * 4000))
        )
        records = emit_training_records(
            tree, enumerate_terminal_paths(tree), max_input_tokens=100
        )
        assert all(r.node_id != leaf for r in records)


class TestWriteDataset:
    def test_empty(self, tmp_path):
        out = tmp_path / "data.jsonl"
        assert write_dataset([], out) == 0
        assert out.read_text(encoding="utf-8") == ""

    def test_roundtrip(self, tmp_path):
        tree = make_tree()
        plant_path(tree, "a", 2, "correct")
        records = emit_training_records(tree, enumerate_terminal_paths(tree))
        out = tmp_path / "data.jsonl"
        assert write_dataset(records, out) == 3
        assert read_dataset(out) == records

    def test_line_count_and_field_order(self, tmp_path):
        tree = make_tree()
        plant_path(tree, "a", 1, "correct")
        records = emit_training_records(tree, enumerate_terminal_paths(tree))
        out = tmp_path / "data.jsonl"
        write_dataset(records, out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(records)
        first = json.loads(lines[0])
        assert list(first.keys()) == ["task_id", "node_id", "path_label", "q_value", "conversation"]
