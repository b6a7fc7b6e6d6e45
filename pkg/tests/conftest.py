from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from hain.data_io import Dataset, SyntheticSpec, generate_synthetic, standardize, stratified_split
from hain.model import HainConfig
from hain.numerics import Rng
from hain.objective import LossWeights
from hain.training import TrainConfig, TrainResult, accuracy, train

_ACCEPTANCE = pytest.StashKey[list]()

BENCH_SEED = 42
BENCH_EPOCHS = 12


@dataclass
class Benchmark:
    train: Dataset
    test: Dataset
    planted: np.ndarray
    cfg: HainConfig
    tc: TrainConfig
    result: TrainResult
    seconds: float
    test_accuracy: float

    @property
    def recall_at_20(self) -> float:
        top = np.argsort(-self.result.selection.alpha_snapshot, kind="stable")[:20]
        return len(set(top.tolist()) & set(self.planted.tolist())) / len(self.planted)


def benchmark_data() -> tuple[Dataset, Dataset, np.ndarray]:
    ds, planted = generate_synthetic(SyntheticSpec(n=2000, d=2000, n_classes=4, n_informative=20,
                                                   separation=2.0, seed=BENCH_SEED))
    tr, te = stratified_split(ds, 0.2, Rng(BENCH_SEED))
    tr = standardize(tr)
    return tr, standardize(te, tr.standardization), planted


def benchmark_configs(epochs: int = BENCH_EPOCHS) -> tuple[HainConfig, TrainConfig]:
    cfg = HainConfig(d=2000, n_classes=4, group_size=16, seed=BENCH_SEED)
    tc = TrainConfig(epochs=epochs, batch_size=32, learning_rate=0.05,
                     weights=LossWeights(0.01, 0.01, 0.1), seed=BENCH_SEED)
    return cfg, tc


@pytest.fixture(scope="session")
def benchmark() -> Benchmark:
    """The desk-scale synthetic benchmark, trained once per session."""
    tr, te, planted = benchmark_data()
    cfg, tc = benchmark_configs()
    start = time.perf_counter()
    res = train(tr, cfg, tc, val=te)
    seconds = time.perf_counter() - start
    return Benchmark(tr, te, planted, cfg, tc, res, seconds, accuracy(cfg, res.params, te))


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
