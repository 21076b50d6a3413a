import pytest

from dcmt.config import RunConfig, apply_overrides
from dcmt.data import SplitSpec, generate_dataset, make_splits

TINY = """
[data]
size = 16
n_subjects = 12
slices_per_subject = 3
train_fraction = 0.75
labeled_fraction = 0.5
labeled_per_batch = 4
unlabeled_per_batch = 2

[model]
input_size = 16
conv_widths = 4 4 4 4

[trainer_cli]
steps = 11
"""


def tiny_config(**trainer) -> RunConfig:
    cfg = apply_overrides(RunConfig(), TINY)
    for k, v in trainer.items():
        setattr(cfg.trainer_cli, k, v)
    cfg.validate()
    return cfg


def tiny_splits(cfg: RunConfig):
    d = cfg.data
    return make_splits(generate_dataset(d), SplitSpec(d.train_fraction, d.labeled_fraction, d.seed))


@pytest.fixture
def tiny_text():
    return TINY


# acceptance criteria report one line each; they are echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
