"""Tokenization for value-model inputs.

Two backends: a self-contained byte-level tokenizer (id = byte + 1, pad = 0)
used for local randomly-initialized bases and tests, and a thin wrapper over
a Hugging Face tokenizer for pretrained bases.  Conversations render as
``role: content`` lines; when the HF tokenizer ships a chat template, that
template wins.
"""

from __future__ import annotations

from typing import List, Optional, Protocol, Sequence

PAD_ID = 0


class ConversationTokenizer(Protocol):
    pad_id: int
    vocab_size: int

    def encode(self, text: str) -> List[int]: ...

    def render(self, messages: Sequence[dict]) -> str: ...


def render_role_content(messages: Sequence[dict]) -> str:
    return "\n".join(f"{m['role']}: {m['content']}" for m in messages) + "\n"


class ByteTokenizer:
    """UTF-8 bytes shifted by one so 0 stays free for padding."""

    pad_id = PAD_ID
    vocab_size = 257

    def encode(self, text: str) -> List[int]:
        return [b + 1 for b in text.encode("utf-8")]

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(i - 1 for i in ids if i > 0).decode("utf-8", errors="replace")

    def render(self, messages: Sequence[dict]) -> str:
        return render_role_content(messages)


class HFTokenizer:
    """Adapter over a pretrained tokenizer (used with pretrained bases)."""

    def __init__(self, name_or_path: str):
        from transformers import AutoTokenizer

        self._tok = AutoTokenizer.from_pretrained(name_or_path)
        if self._tok.pad_token_id is None:
            self._tok.pad_token = self._tok.eos_token
        self.pad_id = int(self._tok.pad_token_id)
        self.vocab_size = int(self._tok.vocab_size)
        self.name_or_path = name_or_path

    def encode(self, text: str) -> List[int]:
        return self._tok.encode(text, add_special_tokens=False)

    def render(self, messages: Sequence[dict]) -> str:
        template = getattr(self._tok, "chat_template", None)
        if template:
            return self._tok.apply_chat_template(
                list(messages), tokenize=False, add_generation_prompt=False
            )
        return render_role_content(messages)


def truncate_conversation(
    messages: Sequence[dict],
    tokenizer: ConversationTokenizer,
    budget_tokens: int,
) -> List[dict]:
    """Keep the head (leading system + first task message) and the most
    recent whole turns that fit the token budget; never split a message.

    Mirrors the truncation rule of the search engine's value client so both
    sides of the wire agree on what an overlong conversation becomes.
    """
    msgs = list(messages)
    head: List[dict] = []
    rest = msgs
    if rest and rest[0].get("role") == "system":
        head.append(rest[0])
        rest = rest[1:]
    if rest and rest[0].get("role") != "assistant":
        head.append(rest[0])
        rest = rest[1:]

    def cost(ms: Sequence[dict]) -> int:
        return sum(len(tokenizer.encode(f"{m['role']}: {m['content']}\n")) for m in ms)

    used = cost(head)
    if used > budget_tokens:
        return head

    turns: List[List[dict]] = []
    for m in rest:
        if m.get("role") == "assistant" or not turns:
            turns.append([m])
        else:
            turns[-1].append(m)

    kept: List[List[dict]] = []
    for turn in reversed(turns):
        turn_cost = cost(turn)
        if used + turn_cost > budget_tokens:
            break
        kept.append(turn)
        used += turn_cost

    out = list(head)
    for turn in reversed(kept):
        out.extend(turn)
    return out
