import numpy as np
import pytest

from pointskip import synthetic
from pointskip.dataset import load_index
from pointskip.model import ModelConfig, StageConfig

TOY_STAGES = (StageConfig(32, 0.3, 8, (8, 16), 16), StageConfig(8, 0.6, 8, (16, 16), 16))


def toy_config(n_classes, **kw):
    base = dict(stages=TOY_STAGES, global_widths=(32,), fc_widths=(16,), n_classes=n_classes,
                dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


def config_text(n_classes, **kw):
    return toy_config(n_classes, **kw).to_text()


@pytest.fixture(scope="session")
def shape_root(tmp_path_factory):
    """Four procedural shape classes, 8 train and 4 test meshes each."""
    root = tmp_path_factory.mktemp("shapes")
    synthetic.write_synthetic_dataset(root, ["sphere", "cube", "plate", "cylinder"], 8, 4, seed=0)
    return root


@pytest.fixture(scope="session")
def shape_index(shape_root):
    return load_index(shape_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{key} {title}: {detail}")
