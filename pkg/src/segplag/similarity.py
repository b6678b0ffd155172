"""Facet similarities between segments and their weighted combination.

Three facets are computed independently and fused linearly:

* pianoroll -- cosine similarity of the flattened binary union rolls;
* onset     -- cosine similarity of the binary onset vectors (pitch-free,
  therefore independent of transposition);
* chord     -- mean per-beat score: 1.0 for root+quality match, 0.5 for a
  root-only match, 0.5 when both beats are unlabeled, else 0.0.

The combined score is maximized over one shared transposition shift in
[-12, +12] applied to the candidate's pitches and chord roots; ties prefer
the smallest |shift|, then the negative one. Cosines are computed from
integer cell counts, so scores are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError
from .segmenter import ChordSequence, OnsetVector, PianoRoll, Segment, transpose

MAX_SHIFT = 12

# 0, -1, +1, -2, +2, ...: scanning order that realizes the tie-break
# "smallest |shift| first, negative before positive".
SHIFT_PREFERENCE = [0]
for _k in range(1, MAX_SHIFT + 1):
    SHIFT_PREFERENCE.extend([-_k, _k])

FACET_PIANOROLL = "pianoroll"
FACET_ONSET = "onset"
FACET_CHORD = "chord"

# Explanation labels (pianoroll refines into melody/vocal; onset reports
# as rhythm).
LABEL_MELODY = "melody"
LABEL_VOCAL = "vocal"
LABEL_CHORD = "chord"
LABEL_RHYTHM = "rhythm"


@dataclass(frozen=True)
class FacetScores:
    """Per-facet similarities at the maximizing transposition shift."""

    pianoroll: float
    onset: float
    chord: float
    transposition: int


@dataclass(frozen=True)
class SimilarityWeights:
    """Non-negative facet weights; normalized to sum 1 before use."""

    w_pianoroll: float = 0.5
    w_onset: float = 0.25
    w_chord: float = 0.25

    def normalized(self) -> "SimilarityWeights":
        for name, w in (
            ("w_pianoroll", self.w_pianoroll),
            ("w_onset", self.w_onset),
            ("w_chord", self.w_chord),
        ):
            if w < 0:
                raise ValueError(f"{name} must be non-negative (got {w})")
        total = self.w_pianoroll + self.w_onset + self.w_chord
        if total <= 0:
            raise ValueError("at least one weight must be positive")
        return SimilarityWeights(
            self.w_pianoroll / total, self.w_onset / total, self.w_chord / total
        )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_pianoroll, self.w_onset, self.w_chord)


DEFAULT_WEIGHTS = SimilarityWeights()


def _binary_cosine(inter: int, mass_a: int, mass_b: int) -> float:
    if mass_a == 0 and mass_b == 0:
        return 1.0
    if mass_a == 0 or mass_b == 0:
        return 0.0
    return inter / math.sqrt(mass_a * mass_b)


def pianoroll_similarity(a: PianoRoll, b: PianoRoll) -> float:
    """Cosine of the flattened binary rolls; both empty -> 1.0, one empty
    -> 0.0."""
    if a.cells.shape != b.cells.shape:
        raise GridMismatchError(f"pianoroll shape mismatch: {a.cells.shape} vs {b.cells.shape}")
    inter = int(np.sum(a.cells & b.cells))
    return _binary_cosine(inter, a.mass(), b.mass())


def onset_similarity(a: OnsetVector, b: OnsetVector) -> float:
    """Cosine of the binary onset vectors; same empty conventions."""
    if a.cells.shape != b.cells.shape:
        raise GridMismatchError(f"onset length mismatch: {a.cells.shape} vs {b.cells.shape}")
    inter = int(np.sum(a.cells & b.cells))
    return _binary_cosine(inter, a.mass(), b.mass())


def chord_beat_score(a_label, b_label, shift: int) -> float:
    """Score one beat pair after transposing b's root by `shift`."""
    ra, qa = a_label
    rb, qb = b_label
    if ra is None and rb is None:
        return 0.5
    if ra is None or rb is None:
        return 0.0
    if (rb + shift) % 12 == ra:
        return 1.0 if qa == qb else 0.5
    return 0.0


def chord_similarity(a: ChordSequence, b: ChordSequence, shift: int = 0) -> float:
    """Mean per-beat score of a vs b transposed by `shift` semitones."""
    if len(a) != len(b):
        raise GridMismatchError(f"chord sequence length mismatch: {len(a)} vs {len(b)}")
    total = sum(chord_beat_score(la, lb, shift) for la, lb in zip(a.labels, b.labels))
    return total / len(a.labels)


def combined_similarity(
    a: Segment, b: Segment, weights: SimilarityWeights = DEFAULT_WEIGHTS
) -> tuple[float, FacetScores]:
    """Weighted facet combination, maximized over a shared transposition.

    Returns (score, facets) where facets carries the per-facet values and
    the shift achieving the maximum. The onset facet does not depend on
    the shift and is computed once.
    """
    if a.grid_signature() != b.grid_signature():
        raise GridMismatchError(
            f"segment grid mismatch: {a.grid_signature()} vs {b.grid_signature()}"
        )
    w = weights.normalized()
    onset = onset_similarity(a.onsets, b.onsets)
    best_score = -1.0
    best: FacetScores | None = None
    for shift in SHIFT_PREFERENCE:
        pr = pianoroll_similarity(a.roll_union, transpose(b.roll_union, shift))
        ch = chord_similarity(a.chords, b.chords, shift)
        score = w.w_pianoroll * pr + w.w_onset * onset + w.w_chord * ch
        if score > best_score:
            best_score = score
            best = FacetScores(pianoroll=pr, onset=onset, chord=ch, transposition=shift)
    assert best is not None
    return best_score, best


def attribute_dominant_facet(
    facets: FacetScores,
    weights: SimilarityWeights,
    query: Segment | None = None,
    candidate: Segment | None = None,
) -> str:
    """Label the facet with the largest weighted contribution.

    A pianoroll win is refined to "melody" or "vocal" by re-scoring the
    per-track rolls at the winning shift (requires both segments); the
    onset facet reports as "rhythm". Ties resolve melody > vocal > chord >
    rhythm, which at family level means pianoroll > chord > rhythm.
    """
    w = weights.normalized()
    contributions = [
        (FACET_PIANOROLL, w.w_pianoroll * facets.pianoroll),
        (FACET_CHORD, w.w_chord * facets.chord),
        (FACET_ONSET, w.w_onset * facets.onset),
    ]
    winner = max(contributions, key=lambda item: item[1])[0]
    if winner == FACET_ONSET:
        return LABEL_RHYTHM
    if winner == FACET_CHORD:
        return LABEL_CHORD
    if query is None or candidate is None:
        return LABEL_MELODY
    melody = pianoroll_similarity(
        query.roll_melody, transpose(candidate.roll_melody, facets.transposition)
    )
    vocal = pianoroll_similarity(
        query.roll_vocal, transpose(candidate.roll_vocal, facets.transposition)
    )
    return LABEL_VOCAL if vocal > melody else LABEL_MELODY
