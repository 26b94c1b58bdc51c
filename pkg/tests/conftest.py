import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six synthetic utterances per class, short durations, WAVs + manifest."""
    from seqemo.data_io import SynthSpec, generate_synth_dataset

    out = tmp_path_factory.mktemp("tiny_corpus")
    generate_synth_dataset(SynthSpec(items_per_class=6, min_duration=0.5, max_duration=1.2, seed=11), out)
    return out


@pytest.fixture(scope="session")
def tiny_cache(tiny_corpus, tmp_path_factory):
    from seqemo.data_io import load_manifest
    from seqemo.pipeline import extract_to_cache

    out = tmp_path_factory.mktemp("tiny_cache")
    result = extract_to_cache(load_manifest(tiny_corpus / "manifest.csv"), out)
    assert not result.errors
    return out


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number): acceptance criterion check")
    config.acceptance_results = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(results):
        line = f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(line + (f" - {detail}" if detail else ""))
