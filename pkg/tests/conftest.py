import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from symseg.dataset import LabelMap, LabelVocabulary  # noqa: E402


@pytest.fixture(scope="session")
def voc():
    return LabelVocabulary.voc()


@pytest.fixture
def small_vocab():
    return LabelVocabulary(("background", "cow", "person", "horse", "car"))


def blocks_map(vocab, shape, blocks):
    """Label map with rectangles (category, y0, x0, h, w) painted in order."""
    px = np.zeros(shape, dtype=np.uint8)
    for cat, y, x, h, w in blocks:
        px[y:y + h, x:x + w] = cat
    return LabelMap(px, vocab)


@pytest.fixture(scope="session")
def synth_data(tmp_path_factory):
    """Small generated dataset shared across tests: (dir, manifest path, portfolio path)."""
    from symseg.synth import generate_dataset
    root = tmp_path_factory.mktemp("synth")
    manifest, portfolio = generate_dataset(root, n_images=40, seed=3)
    return root, manifest, portfolio


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
