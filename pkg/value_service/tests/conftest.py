import random

import pytest

from value_service.data import ValueTrainingSample
from value_service.model import tiny_spec


@pytest.fixture(scope="session")
def spec():
    return tiny_spec()


def synthetic_conversation(turns: int) -> tuple:
    conv = [{"role": "user", "content": "Question: count the steps."}]
    for t in range(turns):
        conv.append(
            {"role": "assistant", "content": f"Thought: step {t}\nAction: ```python\nrun({t})\n```"}
        )
        conv.append({"role": "user", "content": f"Observation: ok {t}"})
    return tuple(conv)


def length_rule_target(turns: int) -> float:
    # fixed linear rule over conversation length, clipped into range
    return max(-0.9, min(0.9, -0.9 + 0.25 * turns))


def synthetic_dataset(n: int, seed: int = 0, constant: float = None):
    rng = random.Random(seed)
    samples = []
    for _ in range(n):
        turns = rng.randrange(1, 9)
        target = constant if constant is not None else length_rule_target(turns)
        samples.append(
            ValueTrainingSample(conversation=synthetic_conversation(turns), target_q=target)
        )
    return samples
