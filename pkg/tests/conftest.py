import sys
from pathlib import Path

import pytest

# Ensure project root is on sys.path for imports
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from medsemdeid.codec import CodecConfig  # noqa: E402
from medsemdeid.encoders import load_backend  # noqa: E402
from medsemdeid.identity import ProjectionEmbedder  # noqa: E402

DATA = Path(__file__).resolve().parent / "data"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long directional training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Smallest codec that still exercises every component."""
    return CodecConfig(
        image_size=64,
        base_channels=8,
        encryptor_depth=1,
        decryptor_depth=1,
        num_heads=2,
        max_grid=8,
        disc_channels=8,
        disc_layers=2,
    )


@pytest.fixture(scope="session")
def enc_med():
    """Randomly initialized, frozen truncated-diffusion encoder."""
    return load_backend("diffusion-truncated", None, image_size=64, seed=0)


@pytest.fixture(scope="session")
def phi():
    return ProjectionEmbedder(input_size=64, dim=64, seed=0)
