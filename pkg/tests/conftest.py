import json
from pathlib import Path

import numpy as np
import pytest

from lightdistill.cli import main as cli_main

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def tiny_scene_path() -> Path:
    return FIXTURES / "scene_tiny.json"


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_scene_path) -> Path:
    """Rendered frames/depths/GT maps for the 3-frame test scene."""
    out = tmp_path_factory.mktemp("tiny_data")
    rc = cli_main(["scene-gen", "--scene", str(tiny_scene_path), "--out", str(out),
                   "--gt-height", "64"])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def tiny_run_config_doc(tiny_data_dir, tiny_scene_path) -> dict:
    return {
        "data_dir": str(tiny_data_dir),
        "scene": str(tiny_scene_path),
        "n_probes": 3,
        "steps": 10,
        "seed": 0,
        "oracle": "synthetic",
        "env_height": 16,
        "supersample": 2,
        "checkpoint_every": 5,
        "run_name": "test",
    }


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2))
    return path


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def smooth_random_envmap(seed: int, height: int, base: tuple[int, int] = (6, 12)):
    """Random low-frequency HDR environment map (bilinear upsample of a coarse grid)."""
    from lightdistill.envmap import EnvMap, sample_bilinear_grid
    from lightdistill.imagehdr import HdrImage

    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.1, 2.0, size=(base[0], base[1], 3))
    uu = (np.arange(2 * height) + 0.5) * (base[1] / (2 * height))
    vv = (np.arange(height) + 0.5) * (base[0] / height)
    U, V = np.meshgrid(uu, vv)
    big = sample_bilinear_grid(coarse, U, V).astype(np.float32)
    return EnvMap(HdrImage(big))
