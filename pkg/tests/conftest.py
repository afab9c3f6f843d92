import numpy as np
import pytest

from rpae.geometry import AnchorGridSpec, Box
from rpae.model import ModelConfig, RpaeModel
from rpae.synthdata import SceneSpec, generate_dataset, generate_scene


# acceptance criterion -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")


def small_config(**overrides) -> ModelConfig:
    """16x16 images, stride 4: small enough for exhaustive probes."""
    kw = dict(image_height=16, image_width=16, latent_channels=4, rpn_channels=6,
              anchors=AnchorGridSpec(4, ((8, 8), (16, 4), (4, 16))),
              patch_size=8, pooled_size=2, seed=3)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return RpaeModel(small_config())


@pytest.fixture
def small_gts():
    return [(Box(4, 0, 12, 16), 0), (Box(0, 0, 4, 16), 1), (Box(12, 0, 16, 16), 1)]


@pytest.fixture
def scene():
    return generate_scene(SceneSpec(seed=7))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(12, 4, seed=5)
