import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six train and two test phantoms at 16x16, written once per session."""
    from reladiff.phantom import make_dataset

    root = tmp_path_factory.mktemp("phantoms")
    make_dataset(root, seed=3, n_train=6, n_test=2, dims=(16, 16))
    return root / "manifest.json"


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    from reladiff.harness.config import load_config

    return load_config(env={}, dims=[16, 16], manifest=str(tiny_dataset), out_dir=str(tmp_path / "run"),
                       epochs=1, base_width=8, depth=2, embed_dim=8, disc_widths=[4, 8, 1], T=20)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(ln)
