import numpy as np
import pytest

from camera import Camera, Intrinsics, look_at
from gaussians import GaussianCloud, RenderSettings, logit, rgb_to_sh
from scene_io import SyntheticSpec, generate_synthetic, load_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_cloud(rng: np.random.Generator, n: int, spread: float = 0.4, scale=(0.15, 0.35),
                 opacity=(0.4, 0.9)) -> GaussianCloud:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=q,
        log_scales=np.log(rng.uniform(scale[0], scale[1], (n, 3))),
        opacity_logits=np.array([logit(p) for p in rng.uniform(opacity[0], opacity[1], n)]),
        colors=rgb_to_sh(rng.uniform(0.1, 0.9, (n, 3))),
    )


def front_camera(size: int = 16, distance: float = 3.0, focal: float = None) -> Camera:
    """Camera on -z looking at the origin"""
    intr = Intrinsics(focal or size, focal or size, (size - 1) / 2.0, (size - 1) / 2.0, size, size)
    R, t = look_at(np.array([0.0, 0.0, -distance]), np.zeros(3))
    return Camera.from_pose(intr, R, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_settings():
    return RenderSettings(16, 16)


@pytest.fixture(scope="session")
def cuboid_scene(tmp_path_factory):
    """Three views of a textured cuboid over a textured ground plane"""
    out = tmp_path_factory.mktemp("cuboid")
    spec = SyntheticSpec(seed=3, object="cuboid", views=3, size=192, background="clutter", arc=30.0, cells=9,
                         radius=3.0)
    generate_synthetic(spec, str(out))
    return load_scene(str(out / "scene.json"))


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    generate_synthetic(SyntheticSpec(seed=5, object="phantom", views=4, eval_views=1, size=64, arc=90.0), str(out))
    return out
