"""Turn grammar for the agent loop: prompt rendering, completion parsing,
answer-label extraction, and path-to-conversation assembly.

A model turn is either a Thought plus one fenced code cell (an action), or a
Thought plus a ``Formatted answer:`` terminal carrying ``@name[value]``
labels.  Anything else is malformed and terminates the branch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional, Sequence, Tuple

from .gateway import Message

ANSWER_MARKER = "Formatted answer:"
THOUGHT_PREFIX = "Thought:"
ACTION_PREFIX = "Action:"
OBSERVATION_PREFIX = "Observation: "

_CODE_BLOCK_RE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)
_ANSWER_LINE_RE = re.compile(r"^\s*Formatted answer:")

_TEMPLATE_RESOURCE = "task_prompt.txt"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    question: str
    constraints: str = ""
    output_format: str = ""
    file_names: Tuple[str, ...] = ()
    label: Optional[str] = None
    data_dir: str = "."


@dataclass(frozen=True)
class TurnParse:
    kind: str  # "code" | "answer" | "malformed"
    thought: str = ""
    code: Optional[str] = None
    answer_text: Optional[str] = None


@dataclass(frozen=True)
class AnswerLabels:
    entries: Tuple[Tuple[str, str], ...] = ()

    def __bool__(self) -> bool:
        return bool(self.entries)

    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def get(self, name: str) -> Optional[str]:
        for n, raw in self.entries:
            if n == name:
                return raw
        return None


def load_prompt_template() -> str:
    return (
        resources.files("cellsearch").joinpath("prompts", _TEMPLATE_RESOURCE).read_text("utf-8")
    )


def render_task_prompt(task: TaskSpec) -> List[Message]:
    """Instantiate the task prompt template as a single user message."""
    files = ", ".join(task.file_names) if task.file_names else "(none)"
    text = load_prompt_template().format(
        raw_question=task.question,
        constraints=task.constraints,
        output_format=task.output_format,
        file_name=files,
    )
    return [Message(role="user", content=text)]


def _strip_thought_prefix(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith(THOUGHT_PREFIX):
        stripped = stripped[len(THOUGHT_PREFIX) :].strip()
    return stripped


def parse_turn(completion_text: str) -> TurnParse:
    """Classify a completion as an answer turn, a code turn, or malformed.

    ``Formatted answer:`` takes precedence over code fences.  When multiple
    fenced blocks appear, only the first is the action; the fence language tag
    is ignored.  Marker matching is case-sensitive but tolerates leading
    whitespace.
    """
    text = completion_text or ""
    lines = text.splitlines()

    for i, line in enumerate(lines):
        m = _ANSWER_LINE_RE.match(line)
        if m:
            after = line[m.end() :]
            tail_lines = [after] + lines[i + 1 :]
            answer_text = "\n".join(tail_lines).strip()
            thought = _strip_thought_prefix("\n".join(lines[:i]))
            return TurnParse(kind="answer", thought=thought, answer_text=answer_text)

    m = _CODE_BLOCK_RE.search(text)
    if m:
        body = m.group(1)
        if body.endswith("\n"):
            body = body[:-1]
        head_lines = text[: m.start()].splitlines()
        # The action label introduces this fence; cut the thought there.
        for k in range(len(head_lines) - 1, -1, -1):
            if head_lines[k].lstrip().startswith(ACTION_PREFIX):
                head_lines = head_lines[:k]
                break
        thought = _strip_thought_prefix("\n".join(head_lines))
        return TurnParse(kind="code", thought=thought, code=body)

    return TurnParse(kind="malformed", thought=_strip_thought_prefix(text))


_NAME_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_ ")


def parse_answer_labels(text: str) -> AnswerLabels:
    """Extract ``@name[value]`` labels with balanced-bracket value matching.

    Names are letters/digits/spaces/underscores, trimmed and non-empty.
    Values may nest ``[`` ``]`` (lists).  Duplicate names keep the last
    occurrence's value at the first occurrence's position.
    """
    entries: dict[str, str] = {}
    i = 0
    n = len(text or "")
    while i < n:
        at = text.find("@", i)
        if at < 0:
            break
        j = at + 1
        while j < n and text[j] in _NAME_CHARS:
            j += 1
        name = text[at + 1 : j].strip()
        if not name or j >= n or text[j] != "[":
            i = at + 1
            continue
        depth = 0
        k = j
        end = -1
        while k < n:
            if text[k] == "[":
                depth += 1
            elif text[k] == "]":
                depth -= 1
                if depth == 0:
                    end = k
                    break
            k += 1
        if end < 0:
            i = at + 1
            continue
        entries[name] = text[j + 1 : end]
        i = end + 1
    return AnswerLabels(entries=tuple(entries.items()))


def render_assistant_text(turn: TurnParse) -> str:
    """Canonical assistant-message text for a parsed turn.

    ``parse_turn(render_assistant_text(t))`` recovers ``t`` for well-formed
    turns, which keeps persisted trees lossless.
    """
    if turn.kind == "code":
        head = f"{THOUGHT_PREFIX} {turn.thought}\n" if turn.thought else ""
        return f"{head}{ACTION_PREFIX} ```python\n{turn.code}\n```"
    if turn.kind == "answer":
        head = f"{THOUGHT_PREFIX} {turn.thought}\n" if turn.thought else ""
        return f"{head}{ANSWER_MARKER} {turn.answer_text}"
    return f"{THOUGHT_PREFIX} {turn.thought}"


def render_observation_text(observation: str) -> str:
    return OBSERVATION_PREFIX + observation


def strip_observation_text(content: str) -> str:
    if content.startswith(OBSERVATION_PREFIX):
        return content[len(OBSERVATION_PREFIX) :]
    return content


def assemble_conversation(tree, node_id: int) -> List[Message]:
    """Messages along the root-to-node path, in path order.

    The root contributes the rendered task prompt; every other node
    contributes its own assistant turn plus (for executed steps) the
    observation message.
    """
    node = tree.node(node_id)
    path = []
    while node is not None:
        path.append(node)
        node = tree.node(node.parent) if node.parent is not None else None
    path.reverse()
    out: List[Message] = []
    for n in path:
        out.extend(n.messages)
    return out
