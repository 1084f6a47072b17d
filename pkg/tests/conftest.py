"""Shared fixtures.

The expensive fixtures (speaker-encoder pretraining and the two 2000-step
conversion runs) are session-scoped so the acceptance suite and the
module tests reuse one set of trained models.
"""
import time

import pytest
import torch

from scvc.config import ModelConfig, TrainingConfig
from scvc.data import synth_corpus
from scvc.speaker import pretrain_speaker_encoder
from scvc.training import new_model, train

MODEL_CFG = ModelConfig.desk()
TRAIN_CFG = TrainingConfig.desk()

ACCEPTANCE_LINES: list[str] = []


def tiny_model_cfg(**overrides):
    base = dict(d_spk=4, spk_hidden=3, enc_channels=4, d_c=2, pool=2, dec_channels=4,
                dec_hidden=3, dec_layers=1, postnet_channels=3)
    base.update(overrides)
    return ModelConfig(**base)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    return synth_corpus(8, 20, seed=0)


@pytest.fixture(scope="session")
def pretrained(corpus):
    start = time.process_time()
    encoder, ge2e, losses = pretrain_speaker_encoder(corpus, MODEL_CFG, TRAIN_CFG)
    return {"state": {k: v.clone() for k, v in encoder.state_dict().items()},
            "ge2e": ge2e, "losses": losses, "cpu_seconds": time.process_time() - start}


def _train(corpus, pretrained, lambda_scl):
    cfg = TrainingConfig.desk(lambda_scl=lambda_scl)
    model = new_model(MODEL_CFG, cfg.seed, pretrained["state"])
    start = time.process_time()
    model, history = train(corpus, model, cfg)
    return {"model": model, "history": history, "cfg": cfg,
            "cpu_seconds": time.process_time() - start}


@pytest.fixture(scope="session")
def trained(corpus, pretrained):
    """Full model: consistency loss on, attentive bottleneck."""
    return _train(corpus, pretrained, 0.5)


@pytest.fixture(scope="session")
def baseline(corpus, pretrained):
    """Same budget and seeds with the consistency loss switched off."""
    return _train(corpus, pretrained, 0.0)


@pytest.fixture
def double_default_dtype():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
