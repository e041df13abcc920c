import numpy as np
import pytest
from hypothesis import settings

from cadsim.mask import builtin_mask
from cadsim.psf import CameraConfig, generate_psf_stack

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture(scope="session")
def camera():
    return CameraConfig()


@pytest.fixture(scope="session")
def naive_stack(camera):
    return generate_psf_stack(camera)


@pytest.fixture(scope="session")
def small_camera():
    # 5 planes up to 8 px keeps render/recon tests fast
    return CameraConfig(num_planes=5, max_blur_px=8.0)


@pytest.fixture(scope="session")
def small_stack(small_camera):
    return generate_psf_stack(small_camera)


@pytest.fixture(scope="session")
def reference_mask():
    return builtin_mask("reference")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
