import json

import pytest

from sdvpt import training
from sdvpt.config import RunConfig
from sdvpt.data import generate, load_dataset

# A configuration small enough that a full train takes well under a second.
TINY = {
    "data": {
        "n_seen": 5, "n_unseen": 2, "d_t": 8, "image_size": 16, "samples_per_category": 4,
        "val_per_category": 2, "count_range": [1, 4], "distractor_count_range": [1, 2], "seed": 0,
    },
    "train": {
        "e1": 1, "e2": 2, "k": 2, "batch_size": 4, "stage0_steps": 4, "prompt_tokens": 2, "seed": 0,
        "learning_rate": 0.01,
        "model": {"image_size": 16, "patch_size": 8, "depth": 2, "width": 16, "heads": 2, "joint_dim": 8},
    },
}


def tiny_config(**train_overrides) -> RunConfig:
    d = json.loads(json.dumps(TINY))
    d["train"].update(train_overrides)
    return RunConfig.from_dict(d)


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate(tiny_config().data, root)
    return root


@pytest.fixture(scope="session")
def tiny_backbone(tiny_data, tmp_path_factory):
    """Path of a checkpoint holding a pretrained, frozen tiny backbone."""
    rc = tiny_config()
    ds = load_dataset(tiny_data)
    bb = training.build_backbone(rc.train, ds.split("train"), ds.table)
    path = tmp_path_factory.mktemp("tiny_bb") / "stage0"
    training.save_backbone(bb, rc.train, ds.table, path)
    return path


@pytest.fixture(scope="session")
def tiny_run(tiny_data, tiny_backbone, tmp_path_factory):
    """Trained tiny SDVPT and shared-prompt runs; returns their output dirs."""
    rc = tiny_config()
    out = tmp_path_factory.mktemp("tiny_run")
    training.train(rc.train, tiny_data, out / "sdvpt", backbone=tiny_backbone)
    training.train_baseline(rc.train, tiny_data, out / "shared", backbone=tiny_backbone)
    return out


# acceptance bookkeeping: one line per criterion, printed in the terminal summary

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} {status}  {title}" + (f"  ({detail})" if detail else "")
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
