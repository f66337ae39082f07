import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from layerlens.fixture import write_fixture

    directory = tmp_path_factory.mktemp("fixture")
    write_fixture(directory)
    return directory


@pytest.fixture(scope="session")
def tinynet(fixture_dir):
    from layerlens.fixture import MODEL_NAME
    from layerlens.model import load_model

    return load_model(fixture_dir / MODEL_NAME)


@pytest.fixture(scope="session")
def fixture_image_arrays(fixture_dir):
    from layerlens.fixture import IMAGE_NAMES
    from layerlens.masks import load_png

    return [load_png(fixture_dir / f"{name}.png") for name in IMAGE_NAMES]


def random_cluster_map(rng, layer="conv", h=7, w=9, ident="c0"):
    from layerlens.saliency import ClusterMap

    return ClusterMap(
        id=f"{layer}.{ident}",
        layer=layer,
        map=rng.normal(size=(h, w)),
        weight=float(rng.uniform(0.1, 1.0)),
        members=[0],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
