import numpy as np
import pytest

from xmcl.data import SyntheticSpec, generate_synthetic
from xmcl.model import BranchConfig, TwoBranchModel
from xmcl.tasks import TaskDataset


def toy_model(seed=0, sharing="no-sharing", image_dim=5, text_dim=4, hidden=16, embed=3, keep_prob=0.5):
    return TwoBranchModel(BranchConfig(image_dim, hidden, embed), BranchConfig(text_dim, hidden, embed),
                          sharing=sharing, keep_prob=keep_prob, seed=seed)


def toy_task(task_id, n=6, image_dim=5, text_dim=4, seed=0, id_base=None, splits=None):
    """``n`` one-to-one pairs with random features; ids derived from the task id."""
    rng = np.random.default_rng([seed, task_id])
    base = 100 * task_id if id_base is None else id_base
    image_ids = np.arange(base, base + n)
    text_ids = image_ids + 50
    split = np.array(splits if splits is not None else ["train"] * n, dtype=object)
    return TaskDataset(task_id, image_ids, rng.normal(size=(n, image_dim)), text_ids,
                       rng.normal(size=(n, text_dim)), list(zip(image_ids, text_ids)), split, split.copy())


def small_spec(**kw):
    base = dict(pairs_per_category=20, image_dim=12, text_dim=16, latent_dim=4)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture
def small_tasks():
    return generate_synthetic(small_spec())


def random_store(seed, policy="no-reindex", max_entries=500):
    """A store over 1-4 random tasks (at most ``max_entries`` entries) plus the model that built it."""
    from xmcl.index import IndexStore

    rng = np.random.default_rng(seed)
    model = toy_model(int(rng.integers(1 << 30)), hidden=64, embed=int(rng.integers(2, 6)))
    n_tasks = int(rng.integers(1, 5))
    per_task = max(1, max_entries // (2 * n_tasks))
    store = IndexStore(model.embed_dim, policy)
    tasks = []
    for t in range(1, n_tasks + 1):
        task = toy_task(t, n=int(rng.integers(1, per_task + 1)), seed=seed, id_base=1000 * t)
        store.index_task(model, task)
        tasks.append(task)
    return store, model, tasks


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
