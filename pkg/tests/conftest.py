import numpy as np
import pytest
from hypothesis import settings

from cellcount.synth import generate_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """64x64 plates, 5 images per count and group, seed 0."""
    root = tmp_path_factory.mktemp("default_ds")
    generate_dataset(root, rng_seed=0)
    return root


@pytest.fixture(scope="session")
def experiment_dataset(tmp_path_factory):
    """64x64 plates, 25 images per count and group: enough donors for every formula pool."""
    root = tmp_path_factory.mktemp("experiment_ds")
    generate_dataset(root, images_per_count_per_group=25, rng_seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(root, grid=(1, 5, 10, 14, 18), images_per_count_per_group=4, rng_seed=1)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion id -> list of (part, passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(number, []).append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        status = "PASS" if all(p for _, p, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}: {d}" if name else d for name, _, d in parts)
        terminalreporter.write_line(f"[{status}] criterion {number:>2}  {detail}")
