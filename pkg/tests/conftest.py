"""Shared corpus fixtures for the slow, trained-model tests.

The corpus-scale fixtures train VAEs at three latent dimensions with five
restarts each, which takes tens of minutes on one core.  Set
DEEPCLEAN_CACHE=/some/dir to reuse trained models between sessions.
"""

import numpy as np
import pytest

from deepclean import pipeline, synth
from deepclean.preprocess import PreprocessConfig, preprocess

CORPUS_SEED = 0
ACCEPTANCE_LATENT = (2, 5, 20)

_verdicts: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
    if detail:
        line += f": {detail}"
    print(line)
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    return synth.synthesize(synth.CorpusConfig(), CORPUS_SEED)


@pytest.fixture(scope="session")
def bundle(corpus):
    _, _, b = preprocess(corpus.record, PreprocessConfig(seed=CORPUS_SEED), labels=corpus.truth)
    return b


@pytest.fixture(scope="session")
def sweep(bundle):
    """(SweepResults, {(method, ld): model}) for the default five-restart setup."""
    models: dict = {}
    cfg = pipeline.SweepConfig(latent_dims=ACCEPTANCE_LATENT)
    results = pipeline.run_sweep(bundle, cfg, seed=CORPUS_SEED, models=models)
    return results, models


def standardize(bundle, values):
    mean, sd = bundle.standardizer
    return (np.asarray(values, dtype=np.float64) - mean) / sd
