import os

import pytest
import torch
from hypothesis import settings

torch.set_num_threads(int(os.environ.get("MORPHKIT_THREADS", "1")))
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _seed_torch():
    # ad hoc torch.randn draws in tests are reproducible run to run
    torch.manual_seed(1234)


@pytest.fixture
def tiny_cfg():
    from morphkit.denoiser.model import DenoiserConfig

    return DenoiserConfig(M=16, d_model=16, n_blocks=2, n_heads=2, d_cond=8, steps=20, n_time_freqs=4)


# ---------------------------------------------------------------------------
# acceptance runs: one pass/fail line per criterion, printed at the end

ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
