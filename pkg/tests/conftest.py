import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from skysplat.io.toy import make_toy_scene  # noqa: E402
from skysplat.scene import Camera, GaussianBatch, StageTag  # noqa: E402
from skysplat.trainer import TrainConfig, Trainer, TrainScene, parameter_digest  # noqa: E402

TOY_VOXEL = 0.35


@pytest.fixture(scope="session")
def toy():
    return make_toy_scene()


@pytest.fixture(scope="session")
def toy_split(toy):
    return toy.split()


def toy_train_scene(toy):
    train, _ = toy.split()
    return TrainScene(train, toy.points, toy.supervision)


def run_two_stage(toy, seed=0, mode="3d", single_stage=False):
    """The 600 + 400 iteration desk pipeline; records digests around stage 2."""
    cfg = TrainConfig.desk(0.01, base_voxel=TOY_VOXEL, seed=seed, mode=mode, single_stage=single_stage)
    tr = Trainer(toy_train_scene(toy), cfg)
    t0 = time.time()
    info = {}
    if single_stage:
        tr.run()
    else:
        tr.run(until=cfg.schedule.stage1_iters)
        info["levels_after_stage1"] = tr.field.levels.copy()
        info["K_aerial"] = tr.field.lod.K_aerial
        tr.transition()
        info["coarse_before"] = parameter_digest(tr.field, tr.bank, StageTag.COARSE)
        info["fine_before"] = parameter_digest(tr.field, tr.bank, StageTag.FINE)
        tr.run()
        info["coarse_after"] = parameter_digest(tr.field, tr.bank, StageTag.COARSE)
        info["fine_after"] = parameter_digest(tr.field, tr.bank, StageTag.FINE)
    info["seconds"] = time.time() - t0
    _, test = toy.split()
    info["held_out"] = tr.evaluate(test, toy.supervision)
    info["trainer"] = tr
    return info


@pytest.fixture(scope="session")
def full_run(toy):
    return run_two_stage(toy)


@pytest.fixture(scope="session")
def full_run_repeat(toy):
    return run_two_stage(toy)


def pinhole(width=32, height=32, f=30.0, R=None, t=None, view_class="aerial", cid=0):
    R = np.eye(3) if R is None else R
    t = np.zeros(3) if t is None else t
    return Camera(cid, f, f, (width - 1) / 2, (height - 1) / 2, R, t, width, height, view_class)


def random_gaussians(rng, n, mode="3d", depth=(3.0, 8.0), spread=1.5, scale=(0.1, 0.6)):
    mu = np.stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(*depth, n)], 1)
    q = rng.normal(size=(n, 4))
    sd = 3 if mode == "3d" else 2
    s = rng.uniform(*scale, (n, sd))
    sigma = rng.uniform(0.05, 0.95, n)
    color = rng.uniform(0, 1, (n, 3))
    return GaussianBatch(mu, q, s, sigma, color)


@pytest.fixture(scope="session")
def two_chunk():
    from synth import make_two_chunk_scene

    return make_two_chunk_scene()


@pytest.fixture(scope="session")
def two_chunk_results(two_chunk):
    from synth import train

    return train(two_chunk, workers=1)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    from skysplat.io.toy import write_toy_dataset

    root = tmp_path_factory.mktemp("toy")
    return write_toy_dataset(str(root))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
