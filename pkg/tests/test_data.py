import itertools

import numpy as np
import pytest

from scvc.audio import SAMPLE_RATE, Waveform, write_wav
from scvc.data import (NUM_SYMBOLS, Corpus, TrainTriple, TripleSampler, Utterance, load_corpus,
                       render_utterance, sample_triple, split_corpus, symbol_f0, synth_corpus,
                       write_corpus)
from scvc.errors import ValidationError
from scvc.evaluation import mel_mean_probe


@pytest.fixture(scope="module")
def small():
    return synth_corpus(3, 6, seed=4)


def test_symbol_grid_spans_two_octaves():
    assert symbol_f0(0) == pytest.approx(110.0)
    assert symbol_f0(NUM_SYMBOLS - 1) == pytest.approx(440.0)
    ratios = [symbol_f0(k + 1) / symbol_f0(k) for k in range(NUM_SYMBOLS - 1)]
    assert np.allclose(ratios, ratios[0])


def test_synth_corpus_is_bit_identical_for_equal_seed(small):
    again = synth_corpus(3, 6, seed=4)
    for a, b in zip(small.all_utterances(), again.all_utterances()):
        assert a.uid == b.uid and a.content == b.content
        assert np.array_equal(a.waveform.samples, b.waveform.samples)
    assert small.eval_uids == again.eval_uids


def test_synth_corpus_shape(small):
    assert small.speakers == ["spk00", "spk01", "spk02"]
    for utt in small.all_utterances():
        assert SAMPLE_RATE <= len(utt.waveform) <= 3 * SAMPLE_RATE
        assert 5 <= len(utt.content) <= 15
        assert all(0 <= s < NUM_SYMBOLS for s in utt.content)
        assert utt.boundaries[0] == 0 and utt.boundaries[-1] == len(utt.waveform)


def test_content_stream_is_independent_of_speaker_draws():
    # with one more speaker the voice stream is consumed further, the content stream is not
    a = synth_corpus(2, 4, seed=11)
    b = synth_corpus(3, 4, seed=11)
    assert [u.content for u in a.all_utterances()] == [u.content for u in b.all_utterances()[:8]]
    assert a.voices["spk00"] == b.voices["spk00"]


def test_same_content_different_speakers_differ_only_in_envelope(small):
    utt = small.utterances["spk00"][0]
    va, vb = small.voices["spk00"], small.voices["spk01"]
    xa = render_utterance(va, utt.content, utt.boundaries, np.random.default_rng(0))
    xb = render_utterance(vb, utt.content, utt.boundaries, np.random.default_rng(0))
    assert xa.size == xb.size
    freqs = np.linspace(0, 8000, 4001)
    peaks = lambda v: sorted(freqs[i] for i in np.argsort(v.envelope(freqs))[-1:])
    assert va.formants != vb.formants
    assert peaks(va) != peaks(vb)


@pytest.mark.parametrize("n", [0, 1])
def test_synth_corpus_rejects_single_speaker(n):
    with pytest.raises(ValidationError):
        synth_corpus(n, 5)


def test_raw_mel_means_separate_speakers(corpus):
    _, report = mel_mean_probe(corpus)
    assert report.accuracy >= 0.95
    assert report.chance == 1 / 8


# --- splits ----------------------------------------------------------------------

def _utts(n_spk, n_utt):
    speakers = [f"s{k:03d}" for k in range(n_spk)]
    return speakers, {s: [Utterance(f"{s}/{u}", s) for u in range(n_utt)] for s in speakers}


def test_split_reserves_unseen_speakers_and_ten_percent():
    speakers, utts = _utts(109, 20)
    unseen, eval_uids = split_corpus(speakers, utts, unseen_speakers=10, eval_fraction=0.1, seed=3)
    assert len(unseen) == 10
    assert len(eval_uids) == 99 * 2
    assert not any(uid.split("/")[0] in unseen for uid in eval_uids)
    assert (unseen, eval_uids) == split_corpus(speakers, utts, unseen_speakers=10,
                                               eval_fraction=0.1, seed=3)


def test_split_keeps_two_training_utterances():
    speakers, utts = _utts(3, 2)
    _, eval_uids = split_corpus(speakers, utts, unseen_speakers=0, eval_fraction=0.9, seed=0)
    assert not eval_uids


def test_split_rejects_too_many_unseen():
    speakers, utts = _utts(3, 4)
    with pytest.raises(ValidationError):
        split_corpus(speakers, utts, unseen_speakers=2, eval_fraction=0.1, seed=0)


def test_train_and_eval_are_disjoint(corpus):
    for spk in corpus.train_speakers:
        train = {u.uid for u in corpus.train_utterances(spk)}
        held = {u.uid for u in corpus.eval_utterances(spk)}
        assert not train & held
        assert len(train) >= 2 and held


def test_corpus_requires_two_training_utterances():
    with pytest.raises(ValidationError):
        Corpus(["a", "b"], {"a": [Utterance("a/0", "a")], "b": [Utterance("b/0", "b"),
                                                              Utterance("b/1", "b")]})


# --- directory ingestion -------------------------------------------------------------

def _write_tree(root, n_spk, n_utt):
    rng = np.random.default_rng(0)
    for s in range(n_spk):
        d = root / f"p{s:03d}"
        d.mkdir(parents=True)
        for u in range(n_utt):
            write_wav(d / f"{u:03d}.wav", Waveform(0.1 * rng.standard_normal(1600)))


def test_load_corpus_layout_and_split(tmp_path):
    _write_tree(tmp_path, 109, 10)
    corpus, report = load_corpus(tmp_path, seed=5)
    assert not report
    assert corpus.speakers == sorted(corpus.speakers)
    assert len(corpus.unseen) == 10 and len(corpus.train_speakers) == 99
    assert len(corpus.eval_uids) == 99
    again, _ = load_corpus(tmp_path, seed=5)
    assert (again.unseen, again.eval_uids) == (corpus.unseen, corpus.eval_uids)


def test_load_corpus_empty_root(tmp_path):
    with pytest.raises(ValidationError, match="no speakers"):
        load_corpus(tmp_path)


def test_load_corpus_reports_rejections(tmp_path):
    _write_tree(tmp_path, 3, 3)
    (tmp_path / "p000" / "notes.txt").write_text("x")
    with open(tmp_path / "p001" / "bad.wav", "wb") as fh:
        fh.write(b"not a wav")
    corpus, report = load_corpus(tmp_path, unseen_speakers=0)
    reasons = dict(report.rejected)
    assert str(tmp_path / "p000" / "notes.txt") in reasons
    assert str(tmp_path / "p001" / "bad.wav") in reasons
    assert len(corpus.all_utterances()) == 9
    with pytest.raises(ValidationError):
        load_corpus(tmp_path, unseen_speakers=0, strict=True)


def test_write_corpus_round_trips_through_loader(tmp_path, small):
    manifest = write_corpus(small, tmp_path)
    rows = manifest.read_text().splitlines()
    assert len(rows) == len(small.all_utterances())
    path, speaker, symbols = rows[0].split("\t")
    assert path == "spk00/utt000.wav" and speaker == "spk00"
    assert tuple(int(s) for s in symbols.split()) == small.utterances["spk00"][0].content
    loaded, report = load_corpus(tmp_path, unseen_speakers=0)
    assert loaded.speakers == small.speakers
    # 16-bit quantization only
    a = loaded.utterances["spk01"][2].load().samples
    assert np.max(np.abs(a - small.utterances["spk01"][2].waveform.samples)) <= 0.5 / 32768 + 1e-12


# --- triples ---------------------------------------------------------------------

def test_two_by_two_corpus_reaches_all_eight_triples():
    rng = np.random.default_rng(0)
    utts = {s: [Utterance(f"{s}/{k}", s, waveform=Waveform(0.1 * rng.standard_normal(4000)))
                for k in range(2)] for s in "ab"}
    corpus = Corpus(["a", "b"], utts)
    sampler = TripleSampler(corpus, seed=1)
    counts = {}
    for _ in range(4000):
        ui, uj, ub = sampler.draw_utterances()
        key = (ui.uid, uj.uid, ub.uid)
        counts[key] = counts.get(key, 0) + 1
    oracle = {(i.uid, j.uid, b.uid)
              for s, o in (("a", "b"), ("b", "a"))
              for i, j in itertools.permutations(utts[s], 2) for b in utts[o]}
    assert set(counts) == oracle and len(oracle) == 8
    # uniform: 500 expected per triple, binomial sd ~ 21
    assert all(abs(c - 500) < 110 for c in counts.values())


def test_uniform_weights_with_unequal_speaker_sizes():
    speakers, utts = _utts(3, 0)
    utts = {"s000": [Utterance(f"a{k}", "s000") for k in range(2)],
            "s001": [Utterance(f"b{k}", "s001") for k in range(3)],
            "s002": [Utterance(f"c{k}", "s002") for k in range(5)]}
    sampler = TripleSampler(Corpus(speakers, utts), seed=0)
    # valid triples per speaker: n(n-1) ordered pairs times utterances of others
    n = np.array([2, 3, 5])
    expected = n * (n - 1) * (10 - n)
    np.testing.assert_allclose(sampler.speaker_probs, expected / expected.sum())


def test_triple_invariants_over_many_draws(small):
    sampler = TripleSampler(small, seed=2)
    for _ in range(10_000):
        ui, uj, ub = sampler.draw_utterances()
        assert ui.uid != uj.uid
        assert ui.speaker == uj.speaker
        assert ub.speaker != ui.speaker
        assert ui.uid not in small.eval_uids and ub.uid not in small.eval_uids


def test_sample_triple_is_seeded(small):
    a, b = sample_triple(small, 9), sample_triple(small, 9)
    assert (a.uid_i, a.uid_j, a.uid_B) == (b.uid_i, b.uid_j, b.uid_B)


def test_train_triple_validates():
    m = synth_corpus(2, 2, seed=0)
    mel = m.mel(m.all_utterances()[0])
    with pytest.raises(ValidationError):
        TrainTriple(mel, mel, mel, "a", "a")
    with pytest.raises(ValidationError):
        TrainTriple(mel, mel, mel, "a", "b", uid_i="x", uid_j="x")
