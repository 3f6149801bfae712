import warnings

import numpy as np
import pytest
import torch

from ppgvc.config import TrainConfig
from ppgvc.pipeline import Trainer, collate, prepare_audio, utterance_item
from ppgvc.postprocess import ShortClipWarning
from ppgvc.synthetic import DEFAULT_SPEAKERS, synth_utterance

TOY_TRAIN_STEPS = 300


@pytest.fixture
def tiny_cfg():
    return TrainConfig.tiny()


@pytest.fixture(scope="session")
def toy_trainer():
    """Tiny model trained briefly on three synthetic speakers (shared, read-only)."""
    cfg = TrainConfig.tiny()
    speakers = {s.name: k for k, s in enumerate(DEFAULT_SPEAKERS)}
    items = [
        utterance_item(prepare_audio(synth_utterance(i, s, 24000, 2.0), cfg.features), k, cfg)
        for k, s in enumerate(DEFAULT_SPEAKERS)
        for i in range(4)
    ]
    trainer = Trainer(cfg, speakers)
    rng = np.random.default_rng(0)
    for _ in range(TOY_TRAIN_STEPS):
        idx = rng.choice(len(items), 2, replace=False)
        trainer.train_step(collate([items[i] for i in idx]))
    return trainer


@pytest.fixture(autouse=True)
def _quiet_tiling():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShortClipWarning)
        yield


# -- acceptance summary -----------------------------------------------------

_acceptance = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {name}")
