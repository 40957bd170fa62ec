"""The value model: a frozen base language model with low-rank adapters on
its attention projections and a scalar regression head.

The head mean-pools the final hidden states over valid (non-padding) tokens,
applies dropout, a Gaussian-initialized linear map to one logit, and a tanh,
so scores always land in [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .tokenizers import ByteTokenizer, HFTokenizer, truncate_conversation

log = logging.getLogger(__name__)

ARTIFACT_CONFIG = "artifact.json"
ARTIFACT_WEIGHTS = "weights.pt"

DEFAULT_TARGET_SUFFIXES = (
    "attn.c_attn",
    "attn.c_proj",
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
)


@dataclass
class LoraSpec:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    target_suffixes: Tuple[str, ...] = DEFAULT_TARGET_SUFFIXES


@dataclass
class HeadSpec:
    dropout: float = 0.1
    init_std: float = 0.02


class LoRAAdapter(nn.Module):
    """Wraps a projection module with a trainable low-rank delta.

    Handles both ``nn.Linear`` (weight [out, in]) and transformers'
    ``Conv1D`` (weight [in, out]).  The wrapped module stays frozen.
    """

    def __init__(self, wrapped: nn.Module, spec: LoraSpec):
        super().__init__()
        self.wrapped = wrapped
        weight = wrapped.weight
        if isinstance(wrapped, nn.Linear):
            in_features, out_features = weight.shape[1], weight.shape[0]
        else:  # Conv1D-style: weight is [in, out]
            in_features, out_features = weight.shape[0], weight.shape[1]
        self.lora_a = nn.Parameter(torch.empty(in_features, spec.rank))
        self.lora_b = nn.Parameter(torch.zeros(spec.rank, out_features))
        nn.init.normal_(self.lora_a, std=0.02)
        self.lora_dropout = nn.Dropout(spec.dropout)
        self.scaling = spec.alpha / spec.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = (self.lora_dropout(x) @ self.lora_a) @ self.lora_b
        return self.wrapped(x) + delta * self.scaling


def inject_lora(base: nn.Module, spec: LoraSpec) -> int:
    """Replace matching projection modules with LoRA wrappers; returns count."""
    replaced = 0
    for name, module in list(base.named_modules()):
        for child_name, child in list(module.named_children()):
            full = f"{name}.{child_name}" if name else child_name
            if isinstance(child, LoRAAdapter):
                continue
            if not hasattr(child, "weight"):
                continue
            if any(full.endswith(suffix) for suffix in spec.target_suffixes):
                setattr(module, child_name, LoRAAdapter(child, spec))
                replaced += 1
    if replaced == 0:
        raise ValueError(
            f"no modules matched LoRA target suffixes {spec.target_suffixes}"
        )
    return replaced


class ValueHead(nn.Module):
    def __init__(self, hidden_size: int, spec: HeadSpec):
        super().__init__()
        self.dropout = nn.Dropout(spec.dropout)
        self.proj = nn.Linear(hidden_size, 1)
        nn.init.normal_(self.proj.weight, std=spec.init_std)
        nn.init.zeros_(self.proj.bias)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.proj(self.dropout(pooled))).squeeze(-1)


class ValueModel(nn.Module):
    """Base LM + adapters + head; only adapters and head require gradients."""

    def __init__(self, base: nn.Module, hidden_size: int, lora: LoraSpec, head: HeadSpec):
        super().__init__()
        for param in base.parameters():
            param.requires_grad_(False)
        self.adapter_count = inject_lora(base, lora)
        self.base = base
        self.value_head = ValueHead(hidden_size, head)

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        hidden = self.base(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state
        mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
        denom = mask.sum(dim=1).clamp(min=1.0)
        pooled = (hidden * mask).sum(dim=1) / denom
        return self.value_head(pooled)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def base_weights_fingerprint(model: ValueModel) -> str:
    """Digest of the frozen base weights (adapters and head excluded)."""
    h = hashlib.sha256()
    for name, param in sorted(model.base.named_parameters()):
        if "lora_" in name:
            continue
        h.update(name.encode())
        h.update(param.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ModelSpec:
    """Everything needed to rebuild the model and tokenizer from disk."""

    base_source: str = "tiny"  # "tiny" (random local config) or "pretrained"
    base_name: Optional[str] = None  # HF name/path when pretrained
    base_config: Optional[dict] = None  # transformers config dict when tiny
    tokenizer: str = "byte"  # "byte" or "hf"
    max_context: int = 8000
    lora: LoraSpec = field(default_factory=LoraSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lora"]["target_suffixes"] = list(self.lora.target_suffixes)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        lora = LoraSpec(**{**doc["lora"], "target_suffixes": tuple(doc["lora"]["target_suffixes"])})
        head = HeadSpec(**doc["head"])
        return cls(
            base_source=doc["base_source"],
            base_name=doc.get("base_name"),
            base_config=doc.get("base_config"),
            tokenizer=doc.get("tokenizer", "byte"),
            max_context=doc.get("max_context", 8000),
            lora=lora,
            head=head,
        )


def tiny_spec(**config_overrides) -> ModelSpec:
    """A small random base for tests and CPU-only smoke runs."""
    config = dict(
        model_type="gpt2",
        vocab_size=257,
        n_positions=512,
        n_embd=64,
        n_layer=2,
        n_head=2,
        bos_token_id=None,
        eos_token_id=None,
    )
    config.update(config_overrides)
    return ModelSpec(base_source="tiny", base_config=config, tokenizer="byte",
                     max_context=min(8000, config["n_positions"]))


def _build_base(spec: ModelSpec):
    from transformers import AutoConfig, AutoModel

    if spec.base_source == "pretrained":
        base = AutoModel.from_pretrained(spec.base_name)
        return base, base.config.hidden_size
    config = AutoConfig.for_model(**spec.base_config)
    base = AutoModel.from_config(config)
    return base, config.hidden_size


def build_tokenizer(spec: ModelSpec):
    if spec.tokenizer == "byte":
        return ByteTokenizer()
    return HFTokenizer(spec.base_name)


def build_model(spec: ModelSpec, seed: Optional[int] = None) -> ValueModel:
    if seed is not None:
        torch.manual_seed(seed)
    base, hidden_size = _build_base(spec)
    return ValueModel(base, hidden_size, spec.lora, spec.head)


def save_artifact(model: ValueModel, spec: ModelSpec, out_dir) -> Path:
    """Persist the spec plus trained tensors.

    Pretrained bases store only adapters and head; tiny bases store the full
    state dict so the artifact is self-contained.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / ARTIFACT_CONFIG).write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    state = model.state_dict()
    if spec.base_source == "pretrained":
        state = {k: v for k, v in state.items() if "lora_" in k or k.startswith("value_head.")}
    torch.save(state, out / ARTIFACT_WEIGHTS)
    return out


def load_artifact(artifact_dir, seed: Optional[int] = None):
    art = Path(artifact_dir)
    spec = ModelSpec.from_dict(json.loads((art / ARTIFACT_CONFIG).read_text(encoding="utf-8")))
    model = build_model(spec, seed=seed)
    state = torch.load(art / ARTIFACT_WEIGHTS, map_location="cpu", weights_only=True)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise ValueError(f"artifact carries unknown tensors: {unexpected[:5]}")
    for name in missing:
        if "lora_" in name or name.startswith("value_head."):
            raise ValueError(f"artifact misses trained tensor {name}")
    model.eval()
    return model, spec


class ValueScorer:
    """Loads an artifact and scores conversations deterministically."""

    def __init__(self, model: ValueModel, spec: ModelSpec):
        self.model = model.eval()
        self.spec = spec
        self.tokenizer = build_tokenizer(spec)

    @classmethod
    def from_artifact(cls, artifact_dir) -> "ValueScorer":
        model, spec = load_artifact(artifact_dir)
        return cls(model, spec)

    def encode(self, messages: Sequence[dict]) -> List[int]:
        trimmed = truncate_conversation(messages, self.tokenizer, self.spec.max_context)
        ids = self.tokenizer.encode(self.tokenizer.render(trimmed))
        return ids[-self.spec.max_context :] if ids else [self.tokenizer.pad_id]

    @torch.no_grad()
    def score(self, messages: Sequence[dict]) -> float:
        ids = self.encode(messages)
        input_ids = torch.tensor([ids], dtype=torch.long)
        mask = torch.ones_like(input_ids)
        value = self.model(input_ids, mask).item()
        return max(-1.0, min(1.0, value))
