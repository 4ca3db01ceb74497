import pytest
import torch

from tgazsr.model import MiniViT, ViTConfig, encode_text

torch.set_num_threads(1)

TINY = ViTConfig(image_size=8, patch_size=4, width=8, depth=1, heads=2, embed_dim=8, mlp_ratio=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_encoder():
    torch.manual_seed(0)
    return MiniViT(TINY)


@pytest.fixture
def tiny_text():
    return encode_text(["a", "b", "c"], source=0, dim=TINY.embed_dim)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
