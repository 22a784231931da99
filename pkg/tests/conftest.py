import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from onepixel.dataset import gen_weights, synth_dataset  # noqa: E402
from onepixel.model import build_model, bundled_manifest  # noqa: E402

TINY4 = """\
0 input h=4 w=4 c=3
1 conv out=2 k=3 pad=1 w=c1
2 relu
3 flatten
4 dense units=3 w=fc
5 softmax
"""

# 1x1 conv with unit weight: forward is the identity on channel values
IDENTITY_NET = """\
0 input h=2 w=2 c=1
1 conv out=1 k=1 w=id
2 flatten
3 softmax
"""

CONSTANT_HEAD = """\
0 input h=6 w=6 c=3
1 conv out=2 k=3 pad=1 w=c1
2 relu
3 flatten
4 dense units=4 w=fc
5 softmax
"""


@pytest.fixture(scope="session")
def lenet():
    text = bundled_manifest("lenet-small")
    return build_model(text, gen_weights(42, text))


@pytest.fixture(scope="session")
def resnet():
    text = bundled_manifest("resnet-mini")
    return build_model(text, gen_weights(42, text))


@pytest.fixture(scope="session")
def tiny4():
    return build_model(TINY4, gen_weights(1, TINY4))


@pytest.fixture(scope="session")
def constant_head():
    """Dense weights are zero, so the output ignores the input entirely."""
    w = gen_weights(0, CONSTANT_HEAD)
    w["fc.w"] = w["fc.w"] * 0
    w["fc.b"] = w["fc.b"] + [0.0, 2.0, 0.5, 0.0]
    return build_model(CONSTANT_HEAD, w)


@pytest.fixture(scope="session")
def synth7():
    return synth_dataset(7, 20)


# pinned attack fixture: lenet-small (weights 42), synth seed 7, attack seed 5
FIXTURE_SAMPLES = 1000
FIXTURE_ATTACK = {"population_size": 40, "max_generations": 30, "seed": 5}


ATTACK_RUN_SECONDS: list[float] = []


@pytest.fixture(scope="session")
def attack_run(lenet):
    from onepixel.attack import AttackConfig, one_pixel_attack

    start = time.perf_counter()
    samples = synth_dataset(7, FIXTURE_SAMPLES)
    cfg = AttackConfig(**FIXTURE_ATTACK)
    outcomes = [one_pixel_attack(lenet, s, cfg) for s in samples]
    ATTACK_RUN_SECONDS.append(time.perf_counter() - start)
    return samples, outcomes


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
