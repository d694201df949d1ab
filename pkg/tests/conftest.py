import numpy as np
import pytest
import torch

from hmtlpose.config import ModelConfig, SyntheticSpec, validate_config
from hmtlpose.datasets import generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image(rng):
    """Random 224x224 RGB image; every tile is asymmetric with overwhelming probability."""
    return rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(SyntheticSpec(count=24, image_size=64, seed=3, subjects=3))


@pytest.fixture(scope="session")
def tiny_data_2d():
    return generate_synthetic(SyntheticSpec(count=24, image_size=64, seed=4, subjects=3, with_roll=False))


def mini_model_config(**kw) -> ModelConfig:
    base = {"backbone": "mini", "mini_width": 8, "input_size": 64}
    base.update(kw)
    return ModelConfig.model_validate(base)


def tiny_run(**kw):
    """RunConfig for 64px mini-backbone runs; keyword args are deep-merged."""
    data = {
        "mode": "sl",
        "epochs": 1,
        "batch_size": 8,
        "seed": 0,
        "model": {"backbone": "mini", "mini_width": 8, "input_size": 64},
        "augmentation": {"enabled": False},
        "output": {"save_checkpoints": False, "plot": False},
    }
    from hmtlpose.presets import deep_merge

    return validate_config(deep_merge(data, kw))


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# -- acceptance criteria report -------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.failed or report.skipped):
        return
    number, title = marker.args
    _CRITERIA.setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        ran = [r for r in results if r != "skipped"]
        status = "PASS" if ran and all(r == "passed" for r in ran) else "FAIL"
        skipped = len(results) - len(ran)
        note = f" ({skipped} skipped)" if skipped else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}{note}")
