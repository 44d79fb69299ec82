"""Embedding extraction protocol, cosine scoring and EER."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Corpus, TrialSet, Utterance
from .speaker_head import SpeakerEmbedding


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be aligned 1-D arrays")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")


def segment_starts(n_samples: int, segment: int, n_segments: int = 5) -> list[int]:
    return [int(round(s)) for s in np.linspace(0, n_samples - segment, n_segments)]


def segment_embeddings(u: Utterance, embed: Callable[[np.ndarray], SpeakerEmbedding],
                       sample_rate: int, seconds: float = 3.0, n_segments: int = 5) -> list[SpeakerEmbedding]:
    """Full-utterance embedding followed by ``n_segments`` evenly spaced windows.

    Utterances shorter than one window yield only the full-utterance embedding.
    """
    out = [embed(u.samples)]
    seg = int(round(seconds * sample_rate))
    if u.n_samples < seg:
        return out
    for s in segment_starts(u.n_samples, seg, n_segments):
        out.append(embed(u.samples[s:s + seg]))
    return out


def cosine_score(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    return float(torch.dot(a.vector, b.vector))


def trial_score(enroll: Sequence[SpeakerEmbedding], test: Sequence[SpeakerEmbedding]) -> float:
    """Mean cosine over every (enroll, test) embedding pair."""
    if not enroll or not test:
        raise ValueError("need at least one embedding on each side")
    e = torch.stack([x.vector for x in enroll])
    t = torch.stack([x.vector for x in test])
    return float((e @ t.T).mean())


def _rates(scores: ScoreSet):
    tgt = np.sort(scores.scores[scores.labels == 1])
    non = np.sort(scores.scores[scores.labels == 0])
    if len(tgt) == 0 or len(non) == 0:
        raise ValueError("EER needs both target and non-target scores")
    thr = np.unique(scores.scores)
    # accept iff score >= t
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    far = 1.0 - np.searchsorted(non, thr, side="left") / len(non)
    # threshold above every score: reject all
    return np.r_[frr, 1.0], np.r_[far, 0.0]


def compute_eer(scores: ScoreSet) -> float:
    """Equal error rate with accept-iff-score>=t and linear interpolation at the crossing."""
    frr, far = _rates(scores)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k])
    a = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


def embed_corpus(corpus: Corpus, embed: Callable[[np.ndarray], SpeakerEmbedding], ids=None,
                 seconds: float = 3.0, n_segments: int = 5) -> dict[str, list[SpeakerEmbedding]]:
    ids = sorted(set(ids)) if ids is not None else [u.id for u in corpus]
    return {i: segment_embeddings(corpus[i], embed, corpus.sample_rate, seconds, n_segments) for i in ids}


def score_trials(trials: TrialSet, corpus: Corpus, embed: Callable[[np.ndarray], SpeakerEmbedding],
                 seconds: float = 3.0, n_segments: int = 5) -> tuple[list[tuple[str, str, float]], ScoreSet]:
    trials.check_ids(corpus)
    needed = {r.enroll_id for r in trials} | {r.test_id for r in trials}
    embs = embed_corpus(corpus, embed, needed, seconds, n_segments)
    rows = [(r.enroll_id, r.test_id, trial_score(embs[r.enroll_id], embs[r.test_id])) for r in trials]
    return rows, ScoreSet(np.array([s for _, _, s in rows]), np.array([r.label for r in trials]))


def write_scores(path: str | Path, rows) -> None:
    Path(path).write_text("".join(f"{e} {t} {s:.6f}\n" for e, t, s in rows))


def format_eer_report(values: dict) -> tuple[str, str]:
    """(human table, key=value text) for a flat dict of results."""
    width = max(len(k) for k in values)
    table = "\n".join(f"{k:<{width}}  {v}" for k, v in values.items()) + "\n"
    kv = "".join(f"{k}={v}\n" for k, v in values.items())
    return table, kv
