import contextlib
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vitplasticity.data_io import generate_synthetic, load_dataset  # noqa: E402
from vitplasticity.transformer import ViTConfig, init_params  # noqa: E402

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@contextlib.contextmanager
def record_criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion; failures still propagate."""
    try:
        yield
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title)
        raise
    ACCEPTANCE[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:2d} {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    """d=8, H=2, L=2, n=5 (2×2 patch grid plus the class token)."""
    return ViTConfig(image_size=4, patch_size=2, channels=3, embed_dim=8, num_heads=2, num_layers=2, num_classes=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ViTConfig()


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_synthetic(root / "pc", "patch_color", 96, 16, seed=1)
    generate_synthetic(root / "spc", "shifted_patch_color", 96, 16, seed=2)
    return root


@pytest.fixture(scope="session")
def pc_dataset(data_dir):
    return load_dataset(data_dir / "pc" / "manifest.json")
