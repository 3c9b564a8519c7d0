import numpy as np
import pytest
import torch

from pixelalign.model import PixelAlignConfig, build_model
from pixelalign.synthworld import WorldConfig, build_default_vocab, generate_dataset

# keep CPU runs reproducible and avoid thread-count noise in timings
torch.set_num_threads(1)

# collected by acceptance tests; printed as a summary section at the end
CRITERION_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    CRITERION_LINES[number] = (
        f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    )
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERION_LINES):
            terminalreporter.write_line(CRITERION_LINES[number])


@pytest.fixture(scope="session")
def vocab():
    return build_default_vocab()


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small model for unit tests; same wiring, fraction of the parameters."""
    return PixelAlignConfig(
        image_size=64, patch_size=16, width=32, enc_depth=1, enc_heads=2,
        fourier_bands=4, ext_layers=2, ext_tokens=4, ext_heads=2,
        lm_depth=1, lm_heads=2, max_len=16, lora_rank=2, lora_alpha=4.0,
    )


@pytest.fixture()
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def small_samples(vocab, world):
    return generate_dataset(4, 9, world, vocab, "dense")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
