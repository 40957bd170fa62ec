"""Batch runner and system boundary: loads task files, fans tasks out over a
worker pool with shared service clients, persists every finished tree, and
keeps a resumable manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .engine import SELECT_MAJORITY, SearchEngine, SearchResult
from .persistence import read_tree, save_tree, snapshot_tree
from .protocol import TaskSpec, parse_answer_labels
from .tree import SearchConfig

log = logging.getLogger(__name__)

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"

MANIFEST_NAME = "manifest.json"
TREES_DIR = "trees"


class TaskFileError(ValueError):
    pass


def load_tasks(path) -> List[TaskSpec]:
    """Read a JSONL task file; reject malformed lines with their line number."""
    tasks: List[TaskSpec] = []
    seen_ids = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskFileError(f"line {lineno}: invalid JSON ({exc})") from exc
            for required in ("task_id", "question"):
                if not doc.get(required):
                    raise TaskFileError(f"line {lineno}: missing field {required!r}")
            label = doc.get("label")
            if label is not None and not parse_answer_labels(label).entries:
                raise TaskFileError(
                    f"line {lineno}: ground-truth label parses to no @name[value] entries"
                )
            if doc["task_id"] in seen_ids:
                raise TaskFileError(f"line {lineno}: duplicate task_id {doc['task_id']!r}")
            seen_ids.add(doc["task_id"])
            tasks.append(
                TaskSpec(
                    task_id=str(doc["task_id"]),
                    question=doc["question"],
                    constraints=doc.get("constraints", ""),
                    output_format=doc.get("output_format", doc.get("format", "")),
                    file_names=tuple(doc.get("file_names", [])),
                    label=label,
                    data_dir=doc.get("data_dir", "."),
                )
            )
    return tasks


def derive_task_seed(master_seed: int, task_id: str) -> int:
    """Stable per-task seed so batch order cannot change results."""
    digest = hashlib.sha256(f"{master_seed}:{task_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class TaskEntry:
    status: str = STATUS_PENDING
    seed: int = 0
    tree_path: Optional[str] = None
    error: Optional[str] = None
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    run_id: str
    out_dir: str
    master_seed: int
    config: dict
    endpoints: Dict[str, str] = field(default_factory=dict)
    tasks: Dict[str, TaskEntry] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "out_dir": self.out_dir,
            "master_seed": self.master_seed,
            "config": self.config,
            "endpoints": self.endpoints,
            "tasks": {tid: entry.to_dict() for tid, entry in self.tasks.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        manifest = cls(
            run_id=doc["run_id"],
            out_dir=doc["out_dir"],
            master_seed=doc["master_seed"],
            config=doc["config"],
            endpoints=dict(doc.get("endpoints", {})),
        )
        for tid, entry in doc.get("tasks", {}).items():
            manifest.tasks[tid] = TaskEntry(**entry)
        return manifest

    def save(self) -> Path:
        path = Path(self.out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False), encoding="utf-8")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        path = Path(out_dir) / MANIFEST_NAME
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _tree_path(out_dir, task_id: str) -> Path:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in task_id)
    return Path(out_dir) / TREES_DIR / f"{safe}.json"


def run_batch(
    tasks: List[TaskSpec],
    engine: SearchEngine,
    out_dir,
    master_seed: int = 0,
    parallel_trees: int = 4,
    select: str = SELECT_MAJORITY,
    endpoints: Optional[Dict[str, str]] = None,
    manifest: Optional[RunManifest] = None,
) -> RunManifest:
    """Run every task through the engine, one worker per tree.

    Finished trees are snapshotted immediately; the manifest is rewritten
    after every task so a crash loses at most the in-flight trees.  Task
    failures are isolated and recorded, never fatal to the batch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = RunManifest(
            run_id=uuid.uuid4().hex,
            out_dir=str(out_dir),
            master_seed=master_seed,
            config=dataclasses.asdict(engine.config),
            endpoints=dict(endpoints or {}),
        )
    by_id = {t.task_id: t for t in tasks}
    for task in tasks:
        if task.task_id not in manifest.tasks:
            manifest.tasks[task.task_id] = TaskEntry(
                seed=derive_task_seed(master_seed, task.task_id)
            )
    manifest.save()

    todo = [tid for tid, e in manifest.tasks.items() if e.status != STATUS_DONE and tid in by_id]

    def _run_one(task_id: str) -> SearchResult:
        task = by_id[task_id]
        entry = manifest.tasks[task_id]
        tree_file = _tree_path(out_dir, task_id)
        if tree_file.exists():
            tree = read_tree(tree_file)
            if tree.iterations_done >= engine.config.max_iterations:
                return SearchResult(tree, list(tree.answer_node_ids), None, [], "budget")
            return engine.continue_search(tree, task, select=select)
        tree = engine.new_tree(task, rng_seed=entry.seed)
        return engine.continue_search(tree, task, select=select)

    with ThreadPoolExecutor(max_workers=max(1, parallel_trees)) as pool:
        futures = {}
        for task_id in todo:
            entry = manifest.tasks[task_id]
            entry.status = STATUS_RUNNING
            entry.started_at = time.time()
            futures[pool.submit(_run_one, task_id)] = task_id
        manifest.save()
        for future in as_completed(futures):
            task_id = futures[future]
            entry = manifest.tasks[task_id]
            try:
                result = future.result()
                path = save_tree(result.tree, _tree_path(out_dir, task_id))
                entry.tree_path = str(path)
                entry.status = STATUS_DONE
                entry.error = None
            except Exception as exc:  # noqa: BLE001 - isolate per-task failures
                log.exception("task %s failed", task_id)
                entry.status = STATUS_FAILED
                entry.error = f"{type(exc).__name__}: {exc}"
            entry.finished_at = time.time()
            manifest.save()
    return manifest


def resume_run(
    tasks: List[TaskSpec],
    engine: SearchEngine,
    out_dir,
    parallel_trees: int = 4,
    select: str = SELECT_MAJORITY,
) -> RunManifest:
    """Re-run pending/failed tasks of an existing run; done tasks stay put.

    Tasks whose snapshot exists but stopped short of the iteration budget
    continue from the snapshot.
    """
    manifest = RunManifest.load(out_dir)
    for entry in manifest.tasks.values():
        if entry.status == STATUS_RUNNING:
            entry.status = STATUS_PENDING
    return run_batch(
        tasks,
        engine,
        out_dir,
        master_seed=manifest.master_seed,
        parallel_trees=parallel_trees,
        select=select,
        manifest=manifest,
    )
