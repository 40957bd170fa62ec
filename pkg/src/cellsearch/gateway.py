"""Clients for the two remote model services: a sampling policy and a value estimator.

Both services speak a small HTTP JSON contract (see ``HttpPolicyClient`` and
``HttpValueClient``).  Scripted/mock implementations live here too so the
search engine can run fully offline.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence

log = logging.getLogger(__name__)

POLICY_API_KEY_VAR = "POLICY_API_KEY"
VALUE_API_KEY_VAR = "VALUE_API_KEY"

DEFAULT_POLICY_INPUT_BUDGET = 100_000
DEFAULT_VALUE_INPUT_BUDGET = 8_000
DEFAULT_MAX_INFLIGHT = 40


class ServiceUnavailable(RuntimeError):
    """Raised when a model service keeps failing after bounded retries."""


class MalformedResponse(RuntimeError):
    """Raised when a model service replies with an unusable payload."""


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user" | "assistant"
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(role=d["role"], content=d["content"])


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_output_tokens: int = 8192
    n: int = 1


@dataclass(frozen=True)
class PolicyCandidate:
    text: str
    mean_logprob: Optional[float] = None


def estimate_tokens(text: str, tokenizer: Optional[Callable[[str], int]] = None) -> int:
    """Deterministic token estimate: ceil(chars/4) unless an exact tokenizer is given."""
    if tokenizer is not None:
        return tokenizer(text)
    return -(-len(text) // 4)


def conversation_tokens(
    messages: Sequence[Message], tokenizer: Optional[Callable[[str], int]] = None
) -> int:
    return sum(estimate_tokens(m.content, tokenizer) for m in messages)


@dataclass(frozen=True)
class TruncationResult:
    messages: List[Message]
    overflowed: bool


def truncate_to_budget(
    messages: Sequence[Message],
    budget_tokens: int,
    tokenizer: Optional[Callable[[str], int]] = None,
) -> TruncationResult:
    """Fit a conversation into a token budget keeping the head and the latest turns.

    The head (a leading system message, if any, plus the first user/task
    message) is always kept.  After that, whole turns are kept from the most
    recent backwards while they fit; a turn is an assistant message together
    with the non-assistant messages that follow it.  Messages are never split.
    If the head alone exceeds the budget the head is returned with
    ``overflowed=True``.
    """
    if budget_tokens <= 0:
        raise ValueError("budget_tokens must be > 0")
    msgs = list(messages)
    head: List[Message] = []
    rest = msgs
    if rest and rest[0].role == "system":
        head.append(rest[0])
        rest = rest[1:]
    if rest and rest[0].role != "assistant":
        head.append(rest[0])
        rest = rest[1:]

    head_cost = conversation_tokens(head, tokenizer)
    if head_cost > budget_tokens:
        return TruncationResult(messages=head, overflowed=True)

    # Group the tail into turns starting at each assistant message.
    turns: List[List[Message]] = []
    for m in rest:
        if m.role == "assistant" or not turns:
            turns.append([m])
        else:
            turns[-1].append(m)

    kept: List[List[Message]] = []
    used = head_cost
    for turn in reversed(turns):
        cost = conversation_tokens(turn, tokenizer)
        if used + cost > budget_tokens:
            break
        kept.append(turn)
        used += cost

    out = list(head)
    for turn in reversed(kept):
        out.extend(turn)
    return TruncationResult(messages=out, overflowed=False)


class PolicyClient(Protocol):
    def generate_candidates(
        self, messages: Sequence[Message], params: SamplingParams
    ) -> List[PolicyCandidate]: ...


class ValueEstimator(Protocol):
    def estimate_value(self, messages: Sequence[Message]) -> float: ...


def clamp_value(value: float) -> float:
    return max(-1.0, min(1.0, float(value)))


def conversation_digest(messages: Sequence[Message]) -> str:
    """Stable digest of a conversation, used to key scripted policies."""
    h = hashlib.sha256()
    for m in messages:
        h.update(m.role.encode("utf-8"))
        h.update(b"\x1f")
        h.update(m.content.encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()


class _RetryingHttpClient:
    """Shared retry/backoff/auth/semaphore plumbing for the two HTTP clients."""

    def __init__(
        self,
        base_url: str,
        api_key_var: str,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 600.0,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        transport: Optional[Callable[..., dict]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_var = api_key_var
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.timeout = timeout
        self._semaphore = threading.Semaphore(max_inflight)
        self._transport = transport or self._requests_transport
        self._sleep = sleep

    def _requests_transport(self, url: str, payload: dict, headers: dict) -> dict:
        import requests

        resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def post(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_var)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        url = self.base_url + path
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            try:
                with self._semaphore:
                    return self._transport(url, payload, headers)
            except Exception as exc:  # noqa: BLE001 - any transport failure is retryable
                last_exc = exc
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff_base * (2**attempt)
                    log.warning(
                        "request to %s failed (attempt %d/%d): %s; retrying in %.1fs",
                        url,
                        attempt + 1,
                        self.max_attempts,
                        exc,
                        delay,
                    )
                    self._sleep(delay)
        raise ServiceUnavailable(f"{url} unavailable after {self.max_attempts} attempts") from last_exc


class HttpPolicyClient:
    """Chat-completion style sampling client.

    Contract: POST {base}/v1/chat/completions with
    ``{model, messages, temperature, top_p, n, max_tokens, logprobs?}`` and a
    response of ``{choices: [{message: {content}, logprobs?}]}``.  Servers may
    return fewer than ``n`` choices per call; the client keeps requesting
    until ``n`` candidates are collected.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        want_logprobs: bool = False,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 600.0,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        transport: Optional[Callable[..., dict]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._http = _RetryingHttpClient(
            base_url,
            POLICY_API_KEY_VAR,
            max_attempts=max_attempts,
            backoff_base=backoff_base,
            timeout=timeout,
            max_inflight=max_inflight,
            transport=transport,
            sleep=sleep,
        )
        self.model = model
        self.want_logprobs = want_logprobs

    def generate_candidates(
        self, messages: Sequence[Message], params: SamplingParams
    ) -> List[PolicyCandidate]:
        out: List[PolicyCandidate] = []
        while len(out) < params.n:
            payload = {
                "model": self.model,
                "messages": [m.to_dict() for m in messages],
                "temperature": params.temperature,
                "top_p": params.top_p,
                "n": params.n - len(out),
                "max_tokens": params.max_output_tokens,
            }
            if self.want_logprobs:
                payload["logprobs"] = True
            data = self._http.post("/v1/chat/completions", payload)
            choices = data.get("choices")
            if not isinstance(choices, list) or not choices:
                raise MalformedResponse(f"policy response carries no choices: {data!r}")
            for choice in choices:
                try:
                    text = choice["message"]["content"]
                except (KeyError, TypeError) as exc:
                    raise MalformedResponse(f"bad choice shape: {choice!r}") from exc
                out.append(
                    PolicyCandidate(text=text, mean_logprob=_mean_logprob_of(choice))
                )
                if len(out) == params.n:
                    break
        return out


def _mean_logprob_of(choice: dict) -> Optional[float]:
    lp = choice.get("logprobs")
    if not isinstance(lp, dict):
        return None
    content = lp.get("content")
    if isinstance(content, list) and content:
        vals = [t.get("logprob") for t in content if isinstance(t, dict)]
        vals = [v for v in vals if isinstance(v, (int, float))]
        if vals:
            return sum(vals) / len(vals)
    mean = lp.get("mean_logprob")
    if isinstance(mean, (int, float)):
        return float(mean)
    return None


class ScriptedPolicy:
    """Deterministic policy for tests and simulation.

    ``script`` maps a conversation digest to a list of completion texts.  When
    no entry matches, ``fallback`` (a pure function of the messages) is
    consulted.  The returned candidates are a pure function of
    ``(messages, params)``.
    """

    def __init__(
        self,
        script: Optional[dict] = None,
        fallback: Optional[Callable[[Sequence[Message], SamplingParams], List[str]]] = None,
    ):
        self.script = dict(script or {})
        self.fallback = fallback

    def generate_candidates(
        self, messages: Sequence[Message], params: SamplingParams
    ) -> List[PolicyCandidate]:
        key = conversation_digest(messages)
        texts = self.script.get(key)
        if texts is None and self.fallback is not None:
            texts = self.fallback(messages, params)
        if texts is None:
            raise ServiceUnavailable(f"scripted policy has no entry for digest {key[:12]}")
        texts = list(texts)
        if len(texts) < params.n:
            texts = (texts * params.n)[: params.n]
        return [PolicyCandidate(text=t) for t in texts[: params.n]]


class HttpValueClient:
    """Value-estimator client: POST {base}/score {messages} -> {"value": r}.

    The input is truncated to ``input_budget`` tokens before dispatch and the
    returned score is clamped to [-1, 1].
    """

    def __init__(
        self,
        base_url: str,
        input_budget: int = DEFAULT_VALUE_INPUT_BUDGET,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 600.0,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        transport: Optional[Callable[..., dict]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._http = _RetryingHttpClient(
            base_url,
            VALUE_API_KEY_VAR,
            max_attempts=max_attempts,
            backoff_base=backoff_base,
            timeout=timeout,
            max_inflight=max_inflight,
            transport=transport,
            sleep=sleep,
        )
        self.input_budget = input_budget

    def estimate_value(self, messages: Sequence[Message]) -> float:
        trimmed = truncate_to_budget(messages, self.input_budget)
        payload = {"messages": [m.to_dict() for m in trimmed.messages]}
        data = self._http.post("/score", payload)
        value = data.get("value")
        if not isinstance(value, (int, float)) or isinstance(value, bool) or math.isnan(value):
            raise MalformedResponse(f"value response carries no usable score: {data!r}")
        return clamp_value(value)


class ZeroValueEstimator:
    """Always scores 0.0; stands in for 'no value model' runs."""

    def estimate_value(self, messages: Sequence[Message]) -> float:
        return 0.0


@dataclass
class FunctionValueEstimator:
    """Wraps a plain scoring function, clamping its output to [-1, 1]."""

    fn: Callable[[Sequence[Message]], float]
    input_budget: Optional[int] = None

    def estimate_value(self, messages: Sequence[Message]) -> float:
        msgs: Sequence[Message] = messages
        if self.input_budget is not None:
            msgs = truncate_to_budget(messages, self.input_budget).messages
        return clamp_value(self.fn(msgs))
