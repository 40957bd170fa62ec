"""CLI: train a value model on trajectory JSONL, serve it, or score a file."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .data import load_dataset
from .model import LoraSpec, ModelSpec, ValueScorer, tiny_spec
from .training import TrainingConfig, train

log = logging.getLogger(__name__)


def _spec_from_args(args: argparse.Namespace) -> ModelSpec:
    if args.base == "tiny":
        spec = tiny_spec()
    else:
        spec = ModelSpec(base_source="pretrained", base_name=args.base, tokenizer="hf")
    spec.max_context = args.max_context
    spec.lora = LoraSpec(rank=args.lora_rank, alpha=args.lora_alpha, dropout=args.lora_dropout)
    return spec


def _cmd_train(args: argparse.Namespace) -> int:
    samples = load_dataset(args.dataset)
    spec = _spec_from_args(args)
    config = TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        warmup_steps=args.warmup_steps,
        weight_decay=args.weight_decay,
        device=args.device,
    )
    report = train(samples, spec, config, args.out, seed=args.seed)
    print(
        f"trained {report.steps} steps on {len(samples)} samples; "
        f"final train MSE {report.final_train_mse:.5f}; artifact at {args.out}"
    )
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve

    serve(args.artifact, host=args.host, port=args.port)
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    scorer = ValueScorer.from_artifact(args.artifact)
    doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    messages = doc["messages"] if isinstance(doc, dict) else doc
    print(json.dumps({"value": scorer.score(messages)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="value-service")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on trajectory JSONL")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True, help="artifact output directory")
    p_train.add_argument("--base", default="tiny", help="'tiny' or a pretrained model name/path")
    p_train.add_argument("--epochs", type=int, default=3)
    p_train.add_argument("--batch-size", type=int, default=4)
    p_train.add_argument("--learning-rate", type=float, default=1e-4)
    p_train.add_argument("--warmup-steps", type=int, default=100)
    p_train.add_argument("--weight-decay", type=float, default=0.01)
    p_train.add_argument("--max-context", type=int, default=8000)
    p_train.add_argument("--lora-rank", type=int, default=8)
    p_train.add_argument("--lora-alpha", type=float, default=32.0)
    p_train.add_argument("--lora-dropout", type=float, default=0.1)
    p_train.add_argument("--device", default="cpu")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=_cmd_train)

    p_serve = sub.add_parser("serve", help="serve /score and /healthz")
    p_serve.add_argument("--artifact", required=True)
    p_serve.add_argument("--host", default="0.0.0.0")
    p_serve.add_argument("--port", type=int, default=8001)
    p_serve.set_defaults(func=_cmd_serve)

    p_score = sub.add_parser("score", help="score one conversation JSON file")
    p_score.add_argument("--artifact", required=True)
    p_score.add_argument("--input", required=True, help='JSON {"messages": [{role, content}]}')
    p_score.set_defaults(func=_cmd_score)

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
