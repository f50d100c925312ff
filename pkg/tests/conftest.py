import math

import numpy as np
import pytest

from netadjust.io import load_topology
from netadjust.mini_engine import SurrogateLogEvaluator
from netadjust.topology import INPUT, LayerSpec, NetworkTopology


@pytest.fixture(scope="session")
def toy4():
    return load_topology("toy4")


@pytest.fixture(scope="session")
def chain():
    return load_topology("chain")


@pytest.fixture(scope="session")
def resnet20():
    return load_topology("resnet20")


@pytest.fixture
def toy_surrogate(toy4):
    return SurrogateLogEvaluator(toy4, weights=[1, 2, 3, 4], bias=math.log(17), temperature=0.25)


def residual_block(conv_channels=17, shortcut_channels=16, size=8):
    """stem -> conv_a -> conv_b, added to the stem output."""
    layers = [
        LayerSpec("stem", "conv", (INPUT,), kernel_size=3, channels=shortcut_channels),
        LayerSpec("a", "conv", ("stem",), kernel_size=3, channels=8),
        LayerSpec("b", "conv", ("a",), kernel_size=3, channels=conv_channels, relu=False),
        LayerSpec("add", "add_junction", ("b", "stem")),
        LayerSpec("pool", "pool", ("add",), global_pool=True),
        LayerSpec("fc", "fc", ("pool",), channels=4),
    ]
    return NetworkTopology((3, size, size), layers, ["stem", "a", "b"], name="block")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_cnn(toy4):
    """A small CNN evaluator and a handle trained on the toy topology."""
    from netadjust.mini_engine import CNNEvaluator, SyntheticDatasetSpec

    ev = CNNEvaluator(SyntheticDatasetSpec(samples_per_class=60, noise_level=2.0), epochs=4,
                      batch_size=16)
    return ev, ev.train(toy4, toy4.default_config(), seed=0)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion; shown in the summary."""
    def record(number, name, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        request.config.stash[_VERDICTS].append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
