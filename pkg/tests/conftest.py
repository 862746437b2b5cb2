import numpy as np
import pytest
import torch

from worknerf.geometry import Aabb
from worknerf.scenegen import build_rig, generate_scene, write_dataset, read_dataset

torch.set_num_threads(2)

# Small dataset shared by IO / training / evaluation tests: 6 scenes at 64x48,
# split 4 train / 2 eval.
SMALL_IMAGE_SIZE = (64, 48)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_dataset")
    rig = build_rig(image_size=SMALL_IMAGE_SIZE)
    scenes = [generate_scene(100 + i, 5) for i in range(6)]
    write_dataset(scenes, rig, root, seed=100, n_objects=5)
    return read_dataset(root)


# Full-protocol dataset for the slow acceptance runs: 60 scenes of 5 objects
# with the stock rig, at reduced image resolution to fit the time budget.
TREND_IMAGE_SIZE = (80, 64)


@pytest.fixture(scope="session")
def trend_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trend_dataset")
    rig = build_rig(image_size=TREND_IMAGE_SIZE)
    scenes = [generate_scene(i, 5) for i in range(60)]
    write_dataset(scenes, rig, root, seed=0, n_objects=5)
    return read_dataset(root)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via axis-angle."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, 2 * np.pi)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
