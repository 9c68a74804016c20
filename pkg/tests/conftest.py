import time

import numpy as np
import pytest

from sslkd.data import SyntheticDatasetSpec, make_synthetic_dataset
from sslkd.encoder import ModelConfig


def tiny_teacher_config(**kw):
    base = dict(frontend_kind="waveform", structure="custom", n_layers=2, d_model=16, d_ffn=32, n_heads=2,
                conv_pos_kernel=4, conv_pos_groups=2, vocab=4, frontend_channels=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_synthetic_dataset(SyntheticDatasetSpec(n_utterances=6, min_duration=0.6, max_duration=0.9,
                                                       n_states=4), seed=0)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_corpus):
    from sslkd.train import TeacherTrainConfig, train_teacher
    cfg = TeacherTrainConfig(steps=3, batch_size=2, crop_frames=16, d_emb=8)
    return train_teacher(tiny_corpus, tiny_teacher_config(), cfg).teacher


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    """Context manager that records PASS/FAIL for one acceptance criterion and checks its time budget."""

    def __init__(self, number: int, title: str, budget_s: float | None = None):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None
        over = self.budget_s is not None and elapsed > self.budget_s
        if over:
            self.notes.append(f"over budget: {elapsed:.1f}s > {self.budget_s:.0f}s")
        status = "PASS" if ok and not over else "FAIL"
        detail = "; ".join(self.notes) if ok else f"{exc_type.__name__}: {exc}"
        ACCEPTANCE[self.number] = f"criterion {self.number} {status} [{elapsed:.1f}s] {self.title}: {detail}"
        print(ACCEPTANCE[self.number])
        if over and ok:
            raise AssertionError(self.notes[-1])
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
