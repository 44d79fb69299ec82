"""Synthetic speaker corpus, cropping, augmentation and trial lists.

Each synthetic speaker is a fixed "voice": a base pitch, three formant
resonances, a spectral tilt and a breathiness level. An utterance renders
that voice as a harmonic source with a per-utterance pitch contour, a
syllable-rate sequence of formant shifts (standing in for phonetic
content), a random channel tilt and additive noise. Utterances of one
speaker share the voice, so they are closer to each other than to other
speakers' utterances, but not trivially so.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch

DEFAULT_RATE = 4000


@dataclass
class Utterance:
    id: str
    speaker: str
    samples: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.samples)


@dataclass
class Corpus:
    utterances: list[Utterance]
    sample_rate: int = DEFAULT_RATE
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {u.id: u for u in self.utterances}
        if len(self._index) != len(self.utterances):
            raise ValueError("duplicate utterance ids")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        try:
            return self._index[utt_id]
        except KeyError:
            raise KeyError(f"unknown utterance id {utt_id!r}") from None

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._index

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})


# ---------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class Voice:
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    tilt_db: float
    breath: float


def _speaker_rng(seed: int, spk: int, utt: int = -1) -> np.random.Generator:
    key = [seed, spk] if utt < 0 else [seed, spk, utt]
    return np.random.default_rng(key)


def draw_voice(rng: np.random.Generator) -> Voice:
    return Voice(
        f0=float(np.exp(rng.uniform(np.log(90.0), np.log(260.0)))),
        formants=(float(rng.uniform(300, 800)), float(rng.uniform(850, 1450)), float(rng.uniform(1500, 1900))),
        bandwidths=tuple(float(b) for b in rng.uniform(60, 220, size=3)),
        tilt_db=float(rng.uniform(-12.0, -3.0)),
        breath=float(rng.uniform(0.05, 0.3)),
    )


def _smooth_noise(rng: np.random.Generator, n: int, knots: int) -> np.ndarray:
    xs = np.linspace(0, n - 1, knots)
    return np.interp(np.arange(n), xs, rng.standard_normal(knots))


def render(voice: Voice, seconds: float, rng: np.random.Generator, sample_rate: int = DEFAULT_RATE,
           content_jitter: float = 0.12, snr_db: tuple[float, float] = (10.0, 30.0)) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    nyq = sample_rate / 2
    # pitch contour: slow drift around the speaker's base pitch
    f0 = voice.f0 * np.exp(0.06 * _smooth_noise(rng, n, max(2, int(seconds * 3))))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    # syllable-rate formant shifts
    n_syl = max(1, int(seconds * rng.uniform(3.0, 5.0)))
    edges = np.sort(rng.integers(0, n, size=n_syl - 1))
    seg = np.searchsorted(edges, np.arange(n), side="right")
    shifts = np.exp(content_jitter * rng.standard_normal((n_syl, 3)))[seg]  # (n, 3)
    envelope = 0.6 + 0.4 * np.sin(np.pi * (np.arange(n) - np.r_[0, edges][seg]) /
                                  np.maximum(1, np.diff(np.r_[0, edges, n])[seg])) ** 2
    n_harm = int(nyq // (voice.f0 * 0.9))
    h = np.arange(1, n_harm + 1)[:, None]
    freqs = h * f0[None, :]
    gain = np.zeros_like(freqs)
    for k in range(3):
        fc = voice.formants[k] * shifts[:, k][None, :]
        gain += 1.0 / (1.0 + ((freqs - fc) / voice.bandwidths[k]) ** 2)
    gain *= 10 ** (voice.tilt_db * np.log2(freqs / 100.0) / 20)
    gain[freqs >= nyq] = 0.0
    x = (gain * np.sin(h * phase[None, :] + rng.uniform(0, 2 * np.pi, size=(n_harm, 1)))).sum(0)
    x = x * envelope
    x /= np.sqrt(np.mean(x ** 2)) + 1e-12
    # breath noise shaped by the same first formant, then a random channel tilt
    breath = rng.standard_normal(n)
    x = x + voice.breath * breath
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    spec *= 10 ** (rng.uniform(-3.0, 3.0) * np.log2(np.maximum(f, 50.0) / 500.0) / 20)
    x = np.fft.irfft(spec, n)
    x /= np.sqrt(np.mean(x ** 2)) + 1e-12
    snr = rng.uniform(*snr_db)
    x = x + 10 ** (-snr / 20) * rng.standard_normal(n)
    return (x / (np.sqrt(np.mean(x ** 2)) + 1e-12)).astype(np.float32)


def synth_corpus(n_speakers: int, utts_per_speaker: int, seed: int, sample_rate: int = DEFAULT_RATE,
                 min_seconds: float = 3.0, max_seconds: float = 5.0, first_speaker: int = 0,
                 content_jitter: float = 0.12) -> Corpus:
    """Deterministic corpus of ``n_speakers`` synthetic voices.

    Speaker ``k`` (global index ``first_speaker + k``) depends only on
    ``(seed, index)``, so corpora built from disjoint index ranges have
    disjoint speakers.
    """
    if n_speakers < 2:
        raise ValueError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1:
        raise ValueError("need at least one utterance per speaker")
    if not 0 < min_seconds <= max_seconds:
        raise ValueError("need 0 < min_seconds <= max_seconds")
    utts = []
    for k in range(first_speaker, first_speaker + n_speakers):
        voice = draw_voice(_speaker_rng(seed, k))
        for j in range(utts_per_speaker):
            rng = _speaker_rng(seed, k, j)
            secs = rng.uniform(min_seconds, max_seconds)
            utts.append(Utterance(f"spk{k:03d}_u{j:02d}", f"spk{k:03d}",
                                  render(voice, secs, rng, sample_rate, content_jitter)))
    return Corpus(utts, sample_rate)


# ---------------------------------------------------------------------------
# cropping, augmentation, batching

def crop_random(u: Utterance, seconds: float, rng: np.random.Generator,
                sample_rate: int = DEFAULT_RATE) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    if u.n_samples < n:
        raise ValueError(f"utterance {u.id} has {u.n_samples} samples, crop needs {n}")
    start = int(rng.integers(0, u.n_samples - n + 1))
    return u.samples[start:start + n]


def add_noise(wave: np.ndarray, rng: np.random.Generator, snr_db: tuple[float, float] = (5.0, 20.0),
              gain_db: tuple[float, float] = (-6.0, 6.0)) -> np.ndarray:
    """Additive white noise at a random SNR plus a random gain."""
    power = float(np.mean(wave.astype(np.float64) ** 2)) + 1e-12
    snr = rng.uniform(*snr_db)
    noisy = wave + np.sqrt(power * 10 ** (-snr / 10)) * rng.standard_normal(wave.shape)
    return (noisy * 10 ** (rng.uniform(*gain_db) / 20)).astype(wave.dtype)


def spec_augment(features: torch.Tensor, time_masks: int, time_width: int, chan_masks: int,
                 chan_width: int, rng: np.random.Generator) -> torch.Tensor:
    """Zero ``time_masks`` stripes of exactly ``time_width`` frames and
    ``chan_masks`` stripes of ``chan_width`` channels, per batch element."""
    b, t, d = features.shape
    if time_width > t or chan_width > d or min(time_masks, time_width, chan_masks, chan_width) < 0:
        raise ValueError(f"mask widths ({time_width}, {chan_width}) exceed feature dims ({t}, {d})")
    mask = np.zeros((b, t, d), dtype=bool)
    for i in range(b):
        for _ in range(time_masks):
            s = int(rng.integers(0, t - time_width + 1))
            mask[i, s:s + time_width, :] = True
        for _ in range(chan_masks):
            s = int(rng.integers(0, d - chan_width + 1))
            mask[i, :, s:s + chan_width] = True
    if not mask.any():
        return features
    m = torch.from_numpy(mask)
    return torch.where(m, torch.zeros((), dtype=features.dtype), features)


class Batch(NamedTuple):
    waves: np.ndarray
    labels: np.ndarray


def iterate_batches(corpus: Corpus, batch_size: int, crop_seconds: float, rng: np.random.Generator,
                    speaker_index: dict[str, int], augment: bool = False,
                    drop_last: bool = True) -> Iterator[Batch]:
    """One epoch of shuffled, randomly cropped batches in seeded order."""
    order = rng.permutation(len(corpus))
    utts = corpus.utterances
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for s in range(0, stop, batch_size):
        idx = order[s:s + batch_size]
        waves = []
        for i in idx:
            w = crop_random(utts[i], crop_seconds, rng, corpus.sample_rate)
            waves.append(add_noise(w, rng) if augment else w)
        labels = np.array([speaker_index[utts[i].speaker] for i in idx], dtype=np.int64)
        yield Batch(np.stack(waves), labels)


# ---------------------------------------------------------------------------
# trials

class Trial(NamedTuple):
    label: int
    enroll_id: str
    test_id: str


@dataclass
class TrialSet:
    records: list[Trial]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def check_ids(self, corpus: Corpus) -> None:
        for r in self.records:
            for utt_id in (r.enroll_id, r.test_id):
                if utt_id not in corpus:
                    raise KeyError(f"trial references unknown utterance {utt_id!r}")


def parse_trials(text: str, source: str = "<string>") -> TrialSet:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{source}:{lineno}: malformed trial line {line!r}")
        records.append(Trial(int(parts[0]), parts[1], parts[2]))
    if not records:
        raise ValueError(f"{source}: no trials")
    return TrialSet(records)


def load_trials(path: str | Path) -> TrialSet:
    return parse_trials(Path(path).read_text(), str(path))


def format_trials(trials: TrialSet) -> str:
    return "".join(f"{r.label} {r.enroll_id} {r.test_id}\n" for r in trials)


def save_trials(path: str | Path, trials: TrialSet) -> None:
    Path(path).write_text(format_trials(trials))


def make_trials(corpus: Corpus, n_trials: int, rng: np.random.Generator) -> TrialSet:
    """Balanced random target / non-target pairs drawn without replacement."""
    ids = [u.id for u in corpus]
    spk = {u.id: u.speaker for u in corpus}
    targets, nontargets = [], []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            (targets if spk[ids[i]] == spk[ids[j]] else nontargets).append((ids[i], ids[j]))
    n_t = min(len(targets), n_trials // 2)
    n_n = min(len(nontargets), n_trials - n_t)
    if n_t == 0 or n_n == 0:
        raise ValueError("corpus cannot provide both target and non-target trials")
    pick_t = rng.choice(len(targets), n_t, replace=False)
    pick_n = rng.choice(len(nontargets), n_n, replace=False)
    recs = [Trial(1, *targets[i]) for i in pick_t] + [Trial(0, *nontargets[i]) for i in pick_n]
    order = rng.permutation(len(recs))
    return TrialSet([recs[i] for i in order])


# ---------------------------------------------------------------------------
# corpus export / ingestion

RAW_MAGIC = "OSKDFT-RAW"


def write_raw(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    data = np.asarray(samples, dtype="<f4")
    header = f"{RAW_MAGIC} sample_rate={sample_rate} n={len(data)} dtype=f4le\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_raw(path: str | Path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if not header or header[0] != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw-float utterance file")
        kv = dict(item.split("=", 1) for item in header[1:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if len(data) != int(kv["n"]):
        raise ValueError(f"{path}: expected {kv['n']} samples, found {len(data)}")
    return data.astype(np.float32), int(kv["sample_rate"])


def write_corpus(corpus: Corpus, directory: str | Path, manifest: str = "manifest.txt") -> Path:
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus:
        rel = os.path.join("wav", f"{u.id}.raw")
        write_raw(directory / rel, u.samples, corpus.sample_rate)
        lines.append(f"{u.id} {u.speaker} {rel}\n")
    out = directory / manifest
    out.write_text("".join(lines))
    return out


def read_corpus(manifest: str | Path) -> Corpus:
    """Load a corpus from an ``id speaker path`` manifest (paths relative to it)."""
    manifest = Path(manifest)
    utts, rate = [], None
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 'id speaker path'")
        samples, r = read_raw(manifest.parent / parts[2])
        if rate is not None and r != rate:
            raise ValueError(f"{manifest}:{lineno}: mixed sample rates {rate} and {r}")
        rate = r
        utts.append(Utterance(parts[0], parts[1], samples))
    if not utts:
        raise ValueError(f"{manifest}: empty manifest")
    return Corpus(utts, rate)
