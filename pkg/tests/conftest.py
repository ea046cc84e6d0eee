import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mvsl.data import generate_synthetic  # noqa: E402
from mvsl.dsg import PromptCorpus  # noqa: E402
from mvsl.encoders import EncoderConfig, build_encoders  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_config():
    return EncoderConfig(seed=0)


@pytest.fixture(scope="session")
def encoders(default_config):
    return build_encoders(default_config)


@pytest.fixture(scope="session")
def small_config():
    return EncoderConfig(seed=3, n_blocks=2, block_dim=16, embed_dim=8, n_heads=2)


@pytest.fixture(scope="session")
def small_encoders(small_config):
    return build_encoders(small_config)


@pytest.fixture
def corpus_4x2():
    names = ("Glioma Tumor", "Meningioma Tumor", "Normal Brain", "Pituitary Tumor")
    return PromptCorpus(
        names,
        tuple((f"an MRI scan of {n}", f"a brain image showing {n}") for n in names),
        modality="MRI",
    )


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """The acceptance dataset: C=4, 40 per class, sigma=0.02."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(4, 40, 0.02, 1, out)


# -- acceptance summary -------------------------------------------------------

_ACCEPTANCE: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    crit = name[len("test_criterion_"):].split("_", 1)[0]
    _ACCEPTANCE.setdefault(crit, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE, key=int):
        outcomes = _ACCEPTANCE[crit]
        ok = all(o == "passed" for o in outcomes)
        detail = "" if len(outcomes) == 1 else \
            f" ({outcomes.count('passed')}/{len(outcomes)} checks passed)"
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}{detail}")
