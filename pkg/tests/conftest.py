import numpy as np
import pytest

from narrowtrap import geometry as geo


@pytest.fixture(scope="session")
def sphere():
    return geo.SurfaceSpec.sphere(1.0)


@pytest.fixture(scope="session")
def torus():
    return geo.SurfaceSpec.flat_torus(1.0, 1.0)


@pytest.fixture(scope="session")
def conf_zero():
    return geo.SurfaceSpec.conformal_torus(1.0, 1.0, {"kind": "zero"}, 64)


@pytest.fixture(scope="session")
def conf_cos():
    return geo.SurfaceSpec.conformal_torus(
        1.0, 1.0, {"kind": "cosine_bump", "amplitude": 0.3, "mode": [1, 0]}, 128
    )


@pytest.fixture(scope="session")
def conf_bump():
    return geo.SurfaceSpec.conformal_torus(
        1.0, 1.0, {"kind": "gaussian_bump", "center": [0.5, 0.5], "width": 0.12, "amplitude": 0.4}, 128
    )


@pytest.fixture(scope="session")
def disk():
    return geo.SurfaceSpec.disk()


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
