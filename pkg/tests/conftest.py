import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("dico", deadline=None, max_examples=50)
settings.load_profile("dico")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Training runs are expensive; the acceptance suite and the trainer tests share them.
ACCEPTANCE_SEEDS = (0, 1, 2)
_RUNS = {}


def trained_run(variant: int, seed: int):
    """(config, splits, TrainResult, seconds) for the toy benchmark, cached per session."""
    import time

    from dico.config import Config, ablation_variant
    from dico.synthdata import build_splits
    from dico.trainer import train

    key = (variant, seed)
    if key not in _RUNS:
        cfg = ablation_variant(Config.toy(), variant)
        cfg = cfg.replace(seeds={"data": seed, "train": seed})
        sp = build_splits(cfg.data, cfg.model.d_raw, seed)
        t0 = time.perf_counter()
        res = train(cfg, sp.train, seed=seed)
        _RUNS[key] = (cfg, sp, res, time.perf_counter() - t0)
    return _RUNS[key]


# One line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
