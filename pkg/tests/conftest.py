import numpy as np
import pytest

from s2tpv.encoder import EncoderConfig
from s2tpv.model import OccupancyModel
from s2tpv.synthetic import Box, Cylinder, RenderConfig, RigSpec, SceneDataset, WorldSpec, build_frame

TOY_ENCODER = dict(H=4, W=4, D=2, embed_dim=4, n_heads=2, n_points=1, n_cross=2,
                   n_ref={"hw": 2, "dh": 3, "wd": 3}, feat_dim=4, n_levels=2,
                   bounds=((-4.0, 4.0), (-4.0, 4.0), (-0.5, 2.5)))
TOY_RENDER = RenderConfig(n_scale=2, feat_dim=4, n_rays=512)


def toy_world(seed=1, n_frames=2, n_cams=1):
    traj = [(0.5 * k, 1.0 * k, 0.2 * k, 0.05 * k) for k in range(n_frames)]
    return WorldSpec(seed=seed, trajectory=traj,
                     boxes=[Box(3, (2.5, 1.0, 0.0), (1.5, 1.0, 1.2), 0.2)],
                     cylinders=[Cylinder(2, (1.0, -2.0, 0.0), 0.5, 2.0)],
                     rig=RigSpec(n_cams=n_cams, width=16, height=16, hfov_deg=100.0, lidar_height=2.0))


ACCEPTANCE: dict = {}


def record_acceptance(number, name, ok, detail):
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {name} -- {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def jitter_model(model, rng, scale=0.3):
    for _, p in model.named_params():
        p.data[...] += rng.normal(0.0, scale, size=p.shape)


@pytest.fixture
def toy_model():
    def make(task="sop", seed=0, **kw):
        return OccupancyModel(EncoderConfig(**{**TOY_ENCODER, **kw}), task=task, seed=seed)
    return make


@pytest.fixture
def toy_frames():
    world = toy_world()
    return [build_frame(world, t, TOY_RENDER) for t in range(len(world))]


@pytest.fixture
def toy_dataset():
    return SceneDataset([toy_world(seed=s, n_frames=3) for s in range(3)], TOY_RENDER)
