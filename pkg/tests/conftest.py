"""Shared fixtures: cached toy checkpoints and the acceptance summary."""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import velocity_edit
from velocity_edit.pipeline import CHECKPOINT_NAMES, load_models
from velocity_edit.toy.training import train_toy

ROOT = Path(__file__).resolve().parent.parent
CACHE_ROOT = Path(os.environ.get("VELOCITY_EDIT_CACHE", ROOT / ".toy_cache"))

# training budget for the cached test checkpoints
TEST_TRAINING = {
    "dense": dict(steps=6000, hidden=256, batch=32),
    "geometry": dict(steps=4000, hidden=128, batch=8),
    "material": dict(steps=5000, hidden=128, batch=8),
}


def _cache_dir() -> Path:
    """Keyed by the toy-world sources and the budget, so stale checkpoints are never reused."""
    pkg = Path(velocity_edit.__file__).parent
    h = hashlib.sha256(json.dumps(TEST_TRAINING, sort_keys=True).encode())
    for name in ("autodiff.py", "flow.py", "toy/nets.py", "toy/shapes.py", "toy/training.py"):
        h.update((pkg / name).read_bytes())
    return CACHE_ROOT / h.hexdigest()[:16]


@pytest.fixture(scope="session")
def toy_checkpoints() -> Path:
    """Directory holding the three trained checkpoints plus ``training.json``."""
    d = _cache_dir()
    summary_path = d / "training.json"
    if summary_path.exists() and all((d / n).exists() for n in CHECKPOINT_NAMES.values()):
        return d
    d.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind, budget in TEST_TRAINING.items():
        start = time.process_time()
        result, before, after = train_toy(kind, budget["steps"], budget["hidden"], batch=budget["batch"], seed=0)
        summary[kind] = {**budget, "val_loss_initial": before, "val_loss_final": after,
                         "cpu_seconds": time.process_time() - start}
        result.net.save(d / CHECKPOINT_NAMES[kind])
    summary_path.write_text(json.dumps(summary, indent=2))
    return d


@pytest.fixture(scope="session")
def training_summary(toy_checkpoints) -> dict:
    return json.loads((toy_checkpoints / "training.json").read_text())


@pytest.fixture(scope="session")
def toy_models(toy_checkpoints):
    return load_models(toy_checkpoints)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one line for the end-of-run summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        _RESULTS[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
