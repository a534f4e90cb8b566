import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("clbench", deadline=None, max_examples=50)
settings.load_profile("clbench")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_stream():
    """Builder for small synthetic scenarios shared by strategy/runner tests."""
    from clbench.data import SynthConfig, gen_synthetic_tasks
    from clbench.scenario import build_incremental_scenario

    def build(kind="class-il", classes=4, cpt=(2, 2), per_class=30, seed=11):
        splits = gen_synthetic_tasks(SynthConfig(classes=classes, train_per_class=per_class, val_per_class=8,
                                                 test_per_class=10, image_shape=(1, 8, 8), seed=seed))
        return build_incremental_scenario(splits, cpt, kind)

    return build


@pytest.fixture(scope="session")
def tiny_model_cfg():
    from clbench.model import ModelConfig
    return ModelConfig(input_shape=(1, 8, 8), conv_filters=(4, 8), feature_dim=16, head_hidden=16)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line per acceptance criterion; echoed in the summary."""
    def emit(number, title, passed, detail=""):
        line = f"ACCEPTANCE {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
