import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import MODEL_CFG, TRAIN_CFG, tiny_model_cfg
from scvc.audio import MelSpectrogram
from scvc.config import TrainingConfig
from scvc.data import synth_corpus
from scvc.errors import TooShortError, ValidationError
from scvc.nn_ops import finite_diff_check
from scvc.speaker import GE2ELoss, SpeakerEncoder, embed_utterance, ge2e_loss, pretrain_speaker_encoder


def unit(*shape, seed=0):
    x = torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return x / x.norm(dim=-1, keepdim=True)


def ge2e_oracle(emb, w, b):
    """Loop-by-loop similarity matrix and softmax cross-entropy."""
    emb = emb.tolist()
    n, m = len(emb), len(emb[0])

    def norm(v):
        s = math.sqrt(sum(x * x for x in v))
        return [x / s for x in v]

    def cos(u, v):
        return sum(a * c for a, c in zip(u, v))

    total = 0.0
    for j in range(n):
        for i in range(m):
            sims = []
            for k in range(n):
                members = [emb[k][q] for q in range(m) if not (k == j and q == i)]
                centroid = norm([sum(col) / len(members) for col in zip(*members)])
                sims.append(w * cos(emb[j][i], centroid) + b)
            top = max(sims)
            log_z = top + math.log(sum(math.exp(s - top) for s in sims))
            total += log_z - sims[j]
    return total


def test_identical_embeddings_give_n_m_log_n():
    emb = unit(1, 1, 6).expand(4, 5, 6).contiguous()
    assert ge2e_loss(emb).item() == pytest.approx(20 * math.log(4), abs=1e-9)
    assert 20 * math.log(4) == pytest.approx(27.726, abs=1e-3)


def test_orthogonal_two_by_two_matches_oracle():
    e = torch.eye(4, dtype=torch.float64)
    emb = torch.stack([torch.stack([e[0], (e[0] + 0.3 * e[2]) / math.hypot(1, 0.3)]),
                       torch.stack([e[1], (e[1] + 0.3 * e[3]) / math.hypot(1, 0.3)])])
    assert ge2e_loss(emb, 10.0, 0.0).item() == pytest.approx(ge2e_oracle(emb, 10.0, 0.0), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 5), m=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_random_batches_match_oracle(n, m, seed):
    emb = unit(n, m, 3, seed=seed)
    assert ge2e_loss(emb, 7.0, -2.0).item() == pytest.approx(ge2e_oracle(emb, 7.0, -2.0), rel=1e-10)


@pytest.mark.parametrize("shape", [(1, 3, 4), (3, 1, 4)])
def test_ge2e_needs_two_by_two(shape):
    with pytest.raises(ValidationError):
        ge2e_loss(unit(*shape))


def test_ge2e_is_nonnegative_and_w_stays_positive():
    loss = GE2ELoss(w=-3.0)
    assert loss(unit(3, 4, 5).float()).item() >= 0


@pytest.mark.parametrize("seed", range(5))
def test_ge2e_permutation_invariance(seed):
    emb = unit(4, 3, 5, seed=seed)
    base = ge2e_loss(emb)
    spk = torch.randperm(4, generator=torch.Generator().manual_seed(seed))
    utt = torch.randperm(3, generator=torch.Generator().manual_seed(seed + 1))
    assert torch.equal(ge2e_loss(emb[spk]), base)
    assert torch.equal(ge2e_loss(emb[:, utt]), base)


@pytest.mark.parametrize("seed", range(5))
def test_ge2e_passes_finite_differences(seed):
    loss = GE2ELoss().double()
    report = finite_diff_check(lambda e: loss(e / e.norm(dim=-1, keepdim=True)),
                               [unit(3, 3, 4, seed=seed)], params=list(loss.parameters()))
    assert report.passed, report


# --- encoder ------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(t=st.integers(1, 40), seed=st.integers(0, 1000))
def test_embeddings_are_unit_norm(t, seed):
    torch.manual_seed(seed)
    enc = SpeakerEncoder(tiny_model_cfg())
    mel = MelSpectrogram(np.random.default_rng(seed).normal(-4, 3, size=(t, 80)))
    assert abs(embed_utterance(enc, mel).norm().item() - 1.0) <= 1e-5


def test_embedding_is_deterministic():
    enc = SpeakerEncoder(MODEL_CFG)
    mel = MelSpectrogram(np.random.default_rng(0).normal(-4, 3, size=(50, 80)))
    assert torch.equal(embed_utterance(enc, mel), embed_utterance(enc, mel))


def test_empty_spectrogram_is_rejected():
    with pytest.raises(TooShortError):
        SpeakerEncoder(MODEL_CFG)(torch.zeros(1, 0, 80))
    with pytest.raises(ValidationError):
        MelSpectrogram(np.zeros((0, 80)))


def test_zero_steps_returns_initialization():
    corpus = synth_corpus(3, 4, seed=1)
    cfg = TrainingConfig.desk(spk_steps=0, spk_speakers=3, spk_utterances=2)
    torch.manual_seed(cfg.seed)
    init = SpeakerEncoder(MODEL_CFG).state_dict()
    enc, _, losses = pretrain_speaker_encoder(corpus, MODEL_CFG, cfg)
    assert losses == []
    assert all(torch.equal(init[k], v) for k, v in enc.state_dict().items())
    assert not any(p.requires_grad for p in enc.parameters())


def test_pretraining_needs_enough_speakers():
    corpus = synth_corpus(3, 4, seed=1)
    with pytest.raises(ValidationError):
        pretrain_speaker_encoder(corpus, MODEL_CFG, TrainingConfig.desk(spk_speakers=4))


def test_pretraining_halves_the_loss(pretrained):
    losses = pretrained["losses"]
    assert len(losses) == TRAIN_CFG.spk_steps == 500
    assert np.mean(losses[-20:]) <= 0.5 * losses[0]


def test_pretrained_encoder_separates_held_out_speakers(corpus, pretrained):
    enc = SpeakerEncoder(MODEL_CFG)
    enc.load_state_dict(pretrained["state"])
    emb, spk = [], []
    for s in corpus.train_speakers:
        for u in corpus.eval_utterances(s):
            emb.append(embed_utterance(enc, corpus.mel(u)))
            spk.append(s)
    emb = torch.stack(emb)
    cos = emb @ emb.T
    same = torch.tensor([[a == b for b in spk] for a in spk])
    off = ~torch.eye(len(spk), dtype=torch.bool)
    intra = cos[same & off].mean().item()
    inter = cos[~same].mean().item()
    assert intra > inter
