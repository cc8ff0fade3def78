"""Synthetic multi-speaker lip-motion surrogate.

Each word class is a blob moving along a fixed trajectory while its radius
pulses. A speaker renders every class through its own photometric, geometric
and temporal distortion, so a recognizer trained on some speakers degrades on
others in a controlled way.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from . import checkpoint

NOISE_STD = 0.05
TEXTURE_RANGE = (0.15, 0.3)
TEXTURE_SMOOTH = 2.0


@dataclass(frozen=True)
class SpeakerProfile:
    speaker: int
    brightness: float = 0.0
    contrast: float = 1.0
    shift: tuple[int, int] = (0, 0)  # (dx, dy) in pixels
    blur: int = 0
    speed: float = 1.0
    texture: float = 0.0  # amplitude of the speaker's static appearance field
    texture_seed: int = 0

    @classmethod
    def identity(cls, speaker: int = 0) -> "SpeakerProfile":
        return cls(speaker)

    @classmethod
    def sample(cls, corpus_seed: int, speaker: int) -> "SpeakerProfile":
        rng = np.random.default_rng([corpus_seed, 1, speaker])
        return cls(
            speaker=speaker,
            brightness=float(rng.uniform(-0.3, 0.3)),
            contrast=float(rng.uniform(0.7, 1.3)),
            shift=(int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
            blur=int(rng.integers(0, 2)),
            speed=float(np.exp(rng.uniform(np.log(0.8), np.log(1.25)))),
            texture=float(rng.uniform(TEXTURE_RANGE[0], TEXTURE_RANGE[1])),
            texture_seed=int(rng.integers(2**31)),
        )

    def texture_field(self, H: int, W: int) -> np.ndarray:
        """Smooth zero-mean field with peak magnitude ``texture`` (zeros when disabled)."""
        if not self.texture:
            return np.zeros((H, W))
        rng = np.random.default_rng(self.texture_seed)
        f = gaussian_filter(rng.normal(size=(H, W)), TEXTURE_SMOOTH, mode="wrap")
        f -= f.mean()
        return self.texture * f / np.abs(f).max()


@dataclass(frozen=True)
class WordPattern:
    """Blob trajectory: start/end centre, base radius, pulse depth and cycles."""
    start: tuple[float, float]
    end: tuple[float, float]
    radius: float
    pulse: float
    cycles: float

    def render(self, frames: int, H: int, W: int, speed: float = 1.0) -> np.ndarray:
        tau = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
        tau = np.clip(0.5 + (tau - 0.5) * speed, 0.0, 1.0)
        (y0, x0), (y1, x1) = self.start, self.end
        cy = (y0 + (y1 - y0) * tau) * (H - 1)
        cx = (x0 + (x1 - x0) * tau) * (W - 1)
        r = self.radius * min(H, W) * (1.0 + self.pulse * np.sin(2 * np.pi * self.cycles * tau))
        yy, xx = np.mgrid[0:H, 0:W]
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        return 0.15 + 0.7 * np.exp(-d2 / (2.0 * r[:, None, None] ** 2))


def make_vocabulary(seed: int, K: int) -> list[WordPattern]:
    rng = np.random.default_rng([seed, 0])
    words = []
    for _ in range(K):
        start = tuple(rng.uniform(0.25, 0.75, 2))
        end = tuple(rng.uniform(0.25, 0.75, 2))
        words.append(WordPattern(start, end, radius=float(rng.uniform(0.08, 0.16)),
                                 pulse=float(rng.uniform(0.1, 0.5)), cycles=float(rng.uniform(0.5, 2.0))))
    return words


def apply_profile(video: np.ndarray, profile: SpeakerProfile) -> np.ndarray:
    """Texture, blur, shift (zero fill), then contrast and brightness; clipped to [0, 1]."""
    out = video + profile.texture_field(*video.shape[1:3])[None] if profile.texture else video
    if profile.blur:
        size = 2 * profile.blur + 1
        out = uniform_filter(out, size=(1, size, size), mode="nearest")
    dx, dy = profile.shift
    if dx or dy:
        shifted = np.zeros_like(out)
        H, W = out.shape[1:3]
        ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
        xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
        shifted[:, yd, xd] = out[:, ys, xs]
        out = shifted
    if profile.contrast != 1.0 or profile.brightness != 0.0:
        out = out * profile.contrast + profile.brightness
    return np.clip(out, 0.0, 1.0)


@dataclass
class Sample:
    index: int
    speaker: int
    labels: tuple[int, ...]
    video: np.ndarray  # [T, H, W, 1]


@dataclass
class SpeakerCorpus:
    seed: int
    mode: str
    num_classes: int
    vocabulary: list[WordPattern]
    profiles: dict[int, SpeakerProfile]
    samples: list[Sample]
    frames: int
    height: int
    width: int
    word_frames: int
    split: dict[int, str] = field(default_factory=dict)

    @property
    def speakers(self) -> list[int]:
        return sorted(self.profiles)

    def by_speaker(self, speaker: int) -> list[Sample]:
        return [s for s in self.samples if s.speaker == speaker]

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.index}:{s.speaker}:{s.labels}".encode())
            h.update(s.video.tobytes())
        return h.hexdigest()


def render_sample(vocab: list[WordPattern], profile: SpeakerProfile, labels, frames_per_word: int,
                  H: int, W: int, rng: np.random.Generator | None, noise: float = NOISE_STD) -> np.ndarray:
    clips = [vocab[k].render(frames_per_word, H, W, profile.speed) for k in labels]
    video = apply_profile(np.concatenate(clips, axis=0), profile)
    if noise and rng is not None:
        video = np.clip(video + rng.normal(0.0, noise, video.shape), 0.0, 1.0)
    return video[..., None]


def generate_corpus(seed: int, num_speakers: int = 10, K: int = 10, samples_per_speaker: int = 100,
                    mode: str = "word_classification", *, frames: int = 12, height: int = 16,
                    width: int = 16, word_frames: int = 4, noise: float = NOISE_STD) -> SpeakerCorpus:
    """Render every sample from ``(seed, sample index)`` alone.

    Word mode: one class per clip of ``frames`` frames. CTC mode: 2-4 words of
    ``word_frames`` frames each, label = the word sequence.
    """
    if num_speakers < 4:
        raise ValueError(f"need at least 4 speakers, got {num_speakers}")
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    if samples_per_speaker < 2:
        raise ValueError("need at least 2 samples per speaker")
    if mode not in ("word_classification", "ctc_sentence"):
        raise ValueError(f"unknown corpus mode {mode!r}")
    vocab = make_vocabulary(seed, K)
    profiles = {s: SpeakerProfile.sample(seed, s) for s in range(num_speakers)}
    samples = []
    idx = 0
    for spk in range(num_speakers):
        for _ in range(samples_per_speaker):
            rng = np.random.default_rng([seed, 2, idx])
            if mode == "word_classification":
                labels = (int(rng.integers(K)),)
                fpw = frames
            else:
                labels = tuple(int(k) for k in rng.integers(K, size=int(rng.integers(2, 5))))
                fpw = word_frames
            video = render_sample(vocab, profiles[spk], labels, fpw, height, width, rng, noise)
            samples.append(Sample(idx, spk, labels, video))
            idx += 1
    return SpeakerCorpus(seed, mode, K, vocab, profiles, samples, frames, height, width, word_frames)


# ---------------------------------------------------------------- splits

@dataclass
class Split:
    name: str
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def speakers(self) -> set[int]:
        return {s.speaker for s in self.samples}


def split_unseen_speakers(corpus: SpeakerCorpus, num_test_speakers: int, adapt_fraction: float = 0.5,
                          test_speakers=None, seen_holdout: float = 0.1
                          ) -> tuple[Split, Split, dict[int, tuple[Split, Split]]]:
    """Hold out whole speakers; halve (by default) each one into adaptation and test data.

    Returns ``(train, seen_test, held)``. ``seen_test`` keeps ``seen_holdout`` of
    every training speaker's samples out of pretraining so held-in accuracy is
    measured on fresh clips.
    """
    if not 0.0 < adapt_fraction < 1.0:
        raise ValueError(f"adapt_fraction must lie in (0, 1), got {adapt_fraction}")
    if not 0.0 <= seen_holdout < 1.0:
        raise ValueError(f"seen_holdout must lie in [0, 1), got {seen_holdout}")
    if not 1 <= num_test_speakers < len(corpus.speakers):
        raise ValueError(f"num_test_speakers must be in 1..{len(corpus.speakers) - 1}")
    rng = np.random.default_rng([corpus.seed, 3])
    if test_speakers is None:
        test_speakers = sorted(int(s) for s in rng.choice(corpus.speakers, num_test_speakers, replace=False))
    test_speakers = sorted(test_speakers)
    corpus.split.clear()
    train, seen = [], []
    for spk in corpus.speakers:
        if spk in test_speakers:
            continue
        pool = corpus.by_speaker(spk)
        n_out = int(round(seen_holdout * len(pool)))
        out = set(np.random.default_rng([corpus.seed, 6, spk]).permutation(len(pool))[:n_out].tolist())
        for i, s in enumerate(pool):
            (seen if i in out else train).append(s)
    train_split, seen_split = Split("train", train), Split("seen-test", seen)
    held = {}
    for spk in test_speakers:
        pool = corpus.by_speaker(spk)
        order = np.random.default_rng([corpus.seed, 4, spk]).permutation(len(pool))
        n_adapt = int(round(adapt_fraction * len(pool)))
        n_adapt = min(max(n_adapt, 1), len(pool) - 1)
        adapt = [pool[i] for i in sorted(order[:n_adapt])]
        test = [pool[i] for i in sorted(order[n_adapt:])]
        held[spk] = (Split(f"adapt-{spk}", adapt), Split(f"test-{spk}", test))
    for part in [train_split, seen_split] + [p for pair in held.values() for p in pair]:
        for s in part.samples:
            corpus.split[s.index] = part.name
    return train_split, seen_split, held


def budget_subset(adapt: Split, budget: int, seed: int = 0) -> Split:
    """First ``budget`` samples of a seeded shuffle; smaller budgets nest in larger ones."""
    if budget < 1 or budget > len(adapt):
        raise ValueError(f"budget {budget} outside 1..{len(adapt)} for {adapt.name}")
    order = np.random.default_rng([seed, 5]).permutation(len(adapt))
    return Split(f"{adapt.name}@{budget}", [adapt.samples[i] for i in sorted(order[:budget])])


def fraction_budget(adapt: Split, fraction: float) -> int:
    """Sample count for a fraction of the adaptation pool (at least one sample)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return max(1, int(round(fraction * len(adapt))))


# ---------------------------------------------------------------- export

def export_corpus(corpus: SpeakerCorpus, out_dir) -> Path:
    """One VSPT file per split plus ``manifest.csv`` (sample id, speaker, labels, split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[Sample]] = {}
    for s in corpus.samples:
        groups.setdefault(corpus.split.get(s.index, "all"), []).append(s)
    for name, samples in sorted(groups.items()):
        entries = {}
        for s in samples:
            entries[f"sample{s.index}.video"] = s.video
            entries[f"sample{s.index}.labels"] = np.asarray(s.labels, dtype=np.float64)
        checkpoint.save(out / f"{name}.vspt", entries,
                        {"kind": "corpus_split", "split": name, "corpus_seed": corpus.seed,
                         "mode": corpus.mode})
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "speaker_id", "label_tokens", "split"])
        for s in corpus.samples:
            w.writerow([s.index, s.speaker, " ".join(map(str, s.labels)), corpus.split.get(s.index, "all")])
    return manifest
