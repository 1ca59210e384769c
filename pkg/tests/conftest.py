import numpy as np
import pytest
import torch

from crossmod.data import PhantomConfig, load_split, synth_phantom
from crossmod.training import set_strict


@pytest.fixture(autouse=True)
def strict_mode():
    set_strict(True)
    yield
    set_strict(False)


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """Six 32^3 phantom subjects, two held out."""
    root = tmp_path_factory.mktemp("phantom")
    cfg = PhantomConfig(grid_size=(32, 32, 32), n_subjects=6, n_holdout=2, seed=11)
    records = synth_phantom(cfg, root)
    return root, cfg, records


@pytest.fixture(scope="session")
def small_train(small_phantom):
    root, _, _ = small_phantom
    return load_split(root, "train")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def snapshot(params):
    """Detached copy of a (possibly nested) dict of parameter tensors."""
    if isinstance(params, dict):
        return {k: snapshot(v) for k, v in params.items()}
    return params.detach().clone()


def same_params(p, q):
    if isinstance(p, dict):
        return isinstance(q, dict) and set(p) == set(q) and all(same_params(p[k], q[k]) for k in p)
    return torch.equal(p, q)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        if n not in results:
            terminalreporter.write_line(f"criterion {n}: FAIL - did not run to completion")
            continue
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
