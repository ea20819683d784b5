import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deepcarve import data  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = data.SynthSpec(num_attributes=3, image_size=12, cooccurrence=0.4, seed=3)
    return data.generate_synthetic(spec, {"train": 6, "val": 2, "test": 4})


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    data.write_dataset(tiny_dataset, root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
