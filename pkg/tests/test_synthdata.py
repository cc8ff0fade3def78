import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsprompt import checkpoint
from vsprompt.losses import min_ctc_frames
from vsprompt.synthdata import (SpeakerProfile, apply_profile, budget_subset, export_corpus, fraction_budget,
                                generate_corpus, make_vocabulary, render_sample, split_unseen_speakers)


@pytest.fixture(scope="module")
def word_corpus():
    return generate_corpus(0, num_speakers=6, K=4, samples_per_speaker=20)


@pytest.fixture(scope="module")
def ctc_corpus():
    return generate_corpus(1, num_speakers=5, K=6, samples_per_speaker=12, mode="ctc_sentence")


def test_generation_is_deterministic(word_corpus):
    again = generate_corpus(0, num_speakers=6, K=4, samples_per_speaker=20)
    assert again.digest() == word_corpus.digest()
    assert generate_corpus(2, num_speakers=6, K=4, samples_per_speaker=20).digest() != word_corpus.digest()


def test_sample_content_depends_only_on_seed_and_index():
    small = generate_corpus(0, num_speakers=4, K=4, samples_per_speaker=5)
    big = generate_corpus(0, num_speakers=6, K=4, samples_per_speaker=9)
    assert small.samples[3].video.tobytes() == big.samples[3].video.tobytes()


def test_identity_profile_without_noise_is_the_pattern():
    vocab = make_vocabulary(0, 3)
    ident = SpeakerProfile.identity()
    a = render_sample(vocab, ident, [2], 12, 16, 16, None, noise=0.0)
    b = render_sample(vocab, ident, [2], 12, 16, 16, np.random.default_rng(0), noise=0.0)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[..., 0], vocab[2].render(12, 16, 16))
    assert a.shape == (12, 16, 16, 1) and a.min() >= 0 and a.max() <= 1


def test_shift_only_profile_moves_pixels():
    clip = make_vocabulary(0, 1)[0].render(4, 16, 16)
    moved = apply_profile(clip, SpeakerProfile(0, shift=(2, -1)))
    np.testing.assert_array_equal(moved[:, :15, 2:], clip[:, 1:, :14])
    assert not moved[:, 15, :].any() and not moved[:, :, :2].any()


def test_speakers_differ(word_corpus):
    p = word_corpus.profiles
    assert len({(q.brightness, q.contrast, q.texture_seed) for q in p.values()}) == len(p)
    assert all(0.15 <= q.texture <= 0.3 for q in p.values())


def test_ctc_samples_are_feasible(ctc_corpus):
    for s in ctc_corpus.samples:
        assert 2 <= len(s.labels) <= 4
        assert s.video.shape[0] == len(s.labels) * ctc_corpus.word_frames
        assert min_ctc_frames(s.labels) <= s.video.shape[0]


def test_split_partitions_samples(word_corpus):
    train, seen, held = split_unseen_speakers(word_corpus, 2)
    ids = [s.index for s in train.samples] + [s.index for s in seen.samples]
    for adapt, test in held.values():
        assert adapt.speakers == test.speakers and len(adapt.speakers) == 1
        ids += [s.index for s in adapt.samples] + [s.index for s in test.samples]
    assert sorted(ids) == list(range(len(word_corpus.samples)))
    assert not train.speakers & set(held)
    assert seen.speakers == train.speakers and len(seen) == 4 * 2
    assert set(word_corpus.split.values()) == {"train", "seen-test"} | {
        f"{k}-{s}" for s in held for k in ("adapt", "test")}


def test_split_validation(word_corpus):
    for kwargs in ({"num_test_speakers": 0}, {"num_test_speakers": 6},
                   {"num_test_speakers": 2, "adapt_fraction": 1.0}):
        with pytest.raises(ValueError):
            split_unseen_speakers(word_corpus, **kwargs)
    _, _, held = split_unseen_speakers(word_corpus, 2, test_speakers=[5, 0])
    assert sorted(held) == [0, 5]


@settings(max_examples=30, deadline=None)
@given(b1=st.integers(1, 10), b2=st.integers(1, 10), seed=st.integers(0, 100))
def test_budget_subsets_nest(word_corpus, b1, b2, seed):
    _, _, held = split_unseen_speakers(word_corpus, 2)
    adapt = next(iter(held.values()))[0]
    small, large = sorted((b1, b2))
    a, b = budget_subset(adapt, small, seed), budget_subset(adapt, large, seed)
    assert len(a) == small and len(b) == large
    assert {s.index for s in a.samples} <= {s.index for s in b.samples}


def test_fraction_budget():
    corpus = generate_corpus(0, num_speakers=4, K=2, samples_per_speaker=40)
    _, _, held = split_unseen_speakers(corpus, 1)
    adapt = next(iter(held.values()))[0]
    assert len(adapt) == 20
    assert [fraction_budget(adapt, f) for f in (0.01, 0.1, 0.5, 1.0)] == [1, 2, 10, 20]
    with pytest.raises(ValueError):
        fraction_budget(adapt, 0.0)
    with pytest.raises(ValueError):
        budget_subset(adapt, 21)


def test_export_manifest(tmp_path, ctc_corpus):
    split_unseen_speakers(ctc_corpus, 1)
    manifest = export_corpus(ctc_corpus, tmp_path)
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["sample_id", "speaker_id", "label_tokens", "split"]
    assert len(rows) == len(ctc_corpus.samples)
    first = ctc_corpus.samples[0]
    assert rows[0]["label_tokens"] == " ".join(map(str, first.labels))
    entries, meta = checkpoint.load(tmp_path / f"{rows[0]['split']}.vspt")
    assert meta["split"] == rows[0]["split"]
    assert entries["sample0.video"].tobytes() == first.video.tobytes()
