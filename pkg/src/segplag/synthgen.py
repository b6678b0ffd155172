"""Synthetic transcribed corpora with planted plagiarism.

Works are generated in beat coordinates (melodies as random walks over a
diatonic scale with beat-aligned onsets, chords from a pool of common
4-chord loops) and materialized through each work's own beat grid. A plant
copies a multi-bar passage from an original work into a comparison work in
beat space, so the passage rasterizes to bit-identical features in both
works even at different tempos; the annotation row records the aligned
downbeat times of every complete 4-bar window inside the passage.

Plant kinds:

* ``exact_copy``  -- notes and chords copied verbatim;
* ``transposed``  -- pitches +k semitones, chord roots +k mod 12;
* ``chord_only``  -- chords copied, melody/vocal freshly generated
  (resampled until no transposition makes the pianorolls similar);
* ``rhythm_only`` -- onset/duration pattern copied with fresh pitches and
  clashing chords (both resampled away from accidental matches);
* ``perturbed``   -- exact copy, then each note deleted with probability
  p. The per-note uniforms are drawn from a p-independent stream, so
  deletion sets are nested across p for a fixed seed.

Everything is deterministic given the spec seed; works use derived
per-work seeds so they could be generated in parallel.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

from .corpus import AnnotationRow, BeatGrid, ChordSpan, MusicWork, NoteEvent
from .errors import ValidationError
from .segmenter import DEFAULT_BAR_COUNT, DEFAULT_CELLS_PER_BEAT, ChordLabel

PLANT_KINDS = ("exact_copy", "transposed", "chord_only", "rhythm_only", "perturbed")

_SCALE = (0, 2, 4, 5, 7, 9, 11)
_MELODY_RANGE = (50, 79)
_VOCAL_RANGE = (57, 86)

# Common 4-chord loops as (root relative to key, quality) per bar.
_CHORD_LOOPS = (
    ((0, "maj"), (7, "maj"), (9, "min"), (5, "maj")),
    ((0, "maj"), (5, "maj"), (7, "maj"), (0, "maj")),
    ((9, "min"), (5, "maj"), (0, "maj"), (7, "maj")),
    ((0, "maj"), (9, "min"), (2, "min"), (7, "maj")),
    ((2, "min"), (7, "maj"), (0, "maj"), (9, "min")),
)

# Per-beat rhythm patterns as (onset offset in beats, duration in beats);
# all notes end on or before the next beat so nothing bleeds across bars.
_RHYTHM_PATTERNS = (
    ((0.0, 1.0),),
    ((0.0, 0.5), (0.5, 0.5)),
    ((0.0, 0.5),),
    ((0.5, 0.5),),
)
_REST_PROBABILITY = 0.15


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic corpus."""

    seed: int = 0
    n_works: int = 50
    bars_per_work: int = 16
    tempo_bpm: tuple[float, float] = (88.0, 132.0)
    beats_per_bar: int = 4
    plant: str = "exact_copy"
    plant_param: float = 0.0
    n_plants: int = 10
    plant_bars: int = 6
    plant_location: str = "random"

    def validate(self) -> None:
        if self.n_works < 2:
            raise ValidationError(f"n_works must be >= 2 (got {self.n_works})")
        if self.bars_per_work < DEFAULT_BAR_COUNT:
            raise ValidationError(
                f"bars_per_work must be >= {DEFAULT_BAR_COUNT} (got {self.bars_per_work})"
            )
        lo, hi = self.tempo_bpm
        if not (0 < lo <= hi):
            raise ValidationError(f"tempo_bpm range invalid: {self.tempo_bpm}")
        if self.beats_per_bar < 1:
            raise ValidationError("beats_per_bar must be >= 1")
        if self.n_plants < 0:
            raise ValidationError("n_plants must be >= 0")
        if self.n_plants:
            if self.plant not in PLANT_KINDS:
                raise ValidationError(f"unknown plant kind {self.plant!r}")
            if self.plant_bars < DEFAULT_BAR_COUNT:
                raise ValidationError(
                    f"plant_bars must be >= {DEFAULT_BAR_COUNT} (got {self.plant_bars})"
                )
            if self.plant_bars > self.bars_per_work:
                raise ValidationError("plant longer than work (infeasible spec)")
            if 2 * self.n_plants > self.n_works:
                raise ValidationError(
                    f"{self.n_plants} plants need {2 * self.n_plants} works, "
                    f"have {self.n_works}"
                )
            if self.plant == "transposed":
                k = int(self.plant_param)
                if k != self.plant_param or not 1 <= abs(k) <= 12:
                    raise ValidationError(
                        f"transposed plant needs an integer shift with 1 <= |k| <= 12 "
                        f"(got {self.plant_param})"
                    )
            if self.plant == "perturbed" and not 0 <= self.plant_param < 1:
                raise ValidationError(
                    f"deletion probability must be in [0, 1) (got {self.plant_param})"
                )
        if self.plant_location not in ("random", "center"):
            raise ValidationError(f"unknown plant_location {self.plant_location!r}")


@dataclass(frozen=True)
class _DraftNote:
    beat: float
    dur_beats: float
    pitch: int
    track: str


@dataclass
class _Draft:
    music_id: str
    title: str
    tempo_bpm: float
    bars: int
    beats_per_bar: int
    notes: list[_DraftNote]
    bar_chords: list[ChordLabel]


def _walk_pitches(rng: random.Random, key: int, pitch_range: tuple[int, int], count: int) -> list[int]:
    lo, hi = pitch_range
    allowed = [p for p in range(lo, hi + 1) if (p - key) % 12 in _SCALE]
    idx = len(allowed) // 2
    pitches = []
    for _ in range(count):
        idx = min(len(allowed) - 1, max(0, idx + rng.choice((-2, -1, -1, 0, 1, 1, 2))))
        pitches.append(allowed[idx])
    return pitches


def _gen_track(rng: random.Random, key: int, track: str, n_beats: int, beat_offset: float = 0.0) -> list[_DraftNote]:
    """Beat-aligned notes for one track over n_beats beats."""
    pitch_range = _MELODY_RANGE if track == "melody" else _VOCAL_RANGE
    slots: list[tuple[float, float]] = []
    for beat in range(n_beats):
        if rng.random() < _REST_PROBABILITY:
            continue
        pattern = rng.choice(_RHYTHM_PATTERNS)
        slots.extend((beat + off, dur) for off, dur in pattern)
    pitches = _walk_pitches(rng, key, pitch_range, len(slots))
    return [
        _DraftNote(beat=beat_offset + b, dur_beats=d, pitch=p, track=track)
        for (b, d), p in zip(slots, pitches)
    ]


def _gen_chords(rng: random.Random, key: int, bars: int) -> list[ChordLabel]:
    loop = rng.choice(_CHORD_LOOPS)
    return [((root + key) % 12, quality) for root, quality in (loop[b % len(loop)] for b in range(bars))]


def _gen_draft(spec: SynthSpec, i: int) -> _Draft:
    rng = random.Random(f"{spec.seed}/work/{i}")
    key = rng.randrange(12)
    tempo = rng.uniform(*spec.tempo_bpm)
    n_beats = spec.bars_per_work * spec.beats_per_bar
    notes = _gen_track(rng, key, "melody", n_beats) + _gen_track(rng, key, "vocal", n_beats)
    return _Draft(
        music_id=f"m{i:03d}",
        title=f"Piece {i:03d}",
        tempo_bpm=tempo,
        bars=spec.bars_per_work,
        beats_per_bar=spec.beats_per_bar,
        notes=notes,
        bar_chords=_gen_chords(rng, key, spec.bars_per_work),
    )


def _materialize(draft: _Draft) -> MusicWork:
    """Turn beat-space content into a MusicWork via the work's beat grid."""
    bpb = draft.beats_per_bar
    period = 60.0 / draft.tempo_bpm
    n_beats = draft.bars * bpb + 1
    grid = BeatGrid(
        beat_times_sec=tuple(j * period for j in range(n_beats)),
        downbeat_flags=tuple(j % bpb == 0 for j in range(n_beats)),
        beats_per_bar=bpb,
    )
    notes = []
    for n in sorted(draft.notes, key=lambda n: (n.beat, n.track, n.pitch)):
        onset = grid.time_at_beat(n.beat)
        offset = grid.time_at_beat(n.beat + n.dur_beats)
        notes.append(
            NoteEvent(onset_sec=onset, duration_sec=offset - onset, pitch=n.pitch, track=n.track)
        )
    chords = []
    for bar, (root, quality) in enumerate(draft.bar_chords):
        chords.append(
            ChordSpan(
                start_sec=grid.time_at_beat(bar * bpb),
                end_sec=grid.time_at_beat((bar + 1) * bpb),
                root=root,
                quality=quality,
            )
        )
    return MusicWork(
        music_id=draft.music_id,
        title=draft.title,
        notes=tuple(notes),
        beat_grid=grid,
        chords=tuple(chords),
    )


# ---------------------------------------------------------------------------
# plant machinery


def _region_cells(notes: list[_DraftNote], beat_lo: float, cells_per_beat: int) -> set[tuple[int, int]]:
    """(pitch, cell) set of a beat-space region, for rejection checks."""
    cells = set()
    for n in notes:
        first = round((n.beat - beat_lo) * cells_per_beat)
        last = round((n.beat + n.dur_beats - beat_lo) * cells_per_beat) - 1
        for c in range(first, last + 1):
            cells.add((n.pitch, c))
    return cells


def _max_shift_cosine(a: set[tuple[int, int]], b: set[tuple[int, int]]) -> float:
    if not a or not b:
        return 0.0
    best = 0.0
    for s in range(-12, 13):
        inter = sum(1 for p, c in b if (p + s, c) in a)
        best = max(best, inter / math.sqrt(len(a) * len(b)))
    return best


def _max_shift_chord_agreement(a: list[ChordLabel], b: list[ChordLabel]) -> float:
    best = 0.0
    for s in range(-12, 13):
        total = 0.0
        for (ra, qa), (rb, qb) in zip(a, b):
            if (rb + s) % 12 == ra:
                total += 1.0 if qa == qb else 0.5
        best = max(best, total / len(a))
    return best


def _extract_region(draft: _Draft, bar_lo: int, bars: int) -> list[_DraftNote]:
    lo = bar_lo * draft.beats_per_bar
    hi = (bar_lo + bars) * draft.beats_per_bar
    return [n for n in draft.notes if lo <= n.beat < hi]


def _replace_region(draft: _Draft, bar_lo: int, bars: int, new_notes: list[_DraftNote]) -> None:
    lo = bar_lo * draft.beats_per_bar
    hi = (bar_lo + bars) * draft.beats_per_bar
    draft.notes = [n for n in draft.notes if not lo <= n.beat < hi] + new_notes


_MAX_RESAMPLES = 24


def _apply_plant(
    spec: SynthSpec,
    plant_no: int,
    orig: _Draft,
    comp: _Draft,
    o_bar: int,
    c_bar: int,
    rng: random.Random,
) -> None:
    bpb = spec.beats_per_bar
    shift_beats = (c_bar - o_bar) * bpb
    src_notes = _extract_region(orig, o_bar, spec.plant_bars)
    src_chords = orig.bar_chords[o_bar : o_bar + spec.plant_bars]
    moved = [replace(n, beat=n.beat + shift_beats) for n in src_notes]
    src_cells = _region_cells(src_notes, o_bar * bpb, DEFAULT_CELLS_PER_BEAT)

    kind = spec.plant
    if kind == "exact_copy":
        _replace_region(comp, c_bar, spec.plant_bars, moved)
        comp.bar_chords[c_bar : c_bar + spec.plant_bars] = src_chords
    elif kind == "transposed":
        k = int(spec.plant_param)
        _replace_region(
            comp, c_bar, spec.plant_bars, [replace(n, pitch=n.pitch + k) for n in moved]
        )
        comp.bar_chords[c_bar : c_bar + spec.plant_bars] = [
            ((root + k) % 12, quality) for root, quality in src_chords
        ]
    elif kind == "chord_only":
        key = rng.randrange(12)
        n_beats = spec.plant_bars * bpb
        for _ in range(_MAX_RESAMPLES):
            fresh = _gen_track(rng, key, "melody", n_beats, c_bar * bpb) + _gen_track(
                rng, key, "vocal", n_beats, c_bar * bpb
            )
            cells = _region_cells(fresh, c_bar * bpb, DEFAULT_CELLS_PER_BEAT)
            if _max_shift_cosine(src_cells, cells) <= 0.45:
                break
        _replace_region(comp, c_bar, spec.plant_bars, fresh)
        comp.bar_chords[c_bar : c_bar + spec.plant_bars] = src_chords
    elif kind == "rhythm_only":
        key = rng.randrange(12)
        for _ in range(_MAX_RESAMPLES):
            by_track = {"melody": [], "vocal": []}
            for n in moved:
                by_track[n.track].append(n)
            fresh = []
            for track, notes in by_track.items():
                pitch_range = _MELODY_RANGE if track == "melody" else _VOCAL_RANGE
                pitches = _walk_pitches(rng, key, pitch_range, len(notes))
                fresh.extend(replace(n, pitch=p) for n, p in zip(notes, pitches))
            cells = _region_cells(fresh, c_bar * bpb, DEFAULT_CELLS_PER_BEAT)
            if _max_shift_cosine(src_cells, cells) <= 0.45:
                break
        for _ in range(_MAX_RESAMPLES):
            clash = [
                (rng.randrange(12), rng.choice(("maj", "min")))
                for _ in range(spec.plant_bars)
            ]
            if _max_shift_chord_agreement(src_chords, clash) <= 0.6:
                break
        _replace_region(comp, c_bar, spec.plant_bars, fresh)
        comp.bar_chords[c_bar : c_bar + spec.plant_bars] = clash
    elif kind == "perturbed":
        # p-independent uniform stream keyed by plant, so deletion sets
        # are nested as p grows.
        u = random.Random(f"{spec.seed}/plant/{plant_no}/perturb")
        kept = [n for n in moved if u.random() >= spec.plant_param]
        _replace_region(comp, c_bar, spec.plant_bars, kept)
        comp.bar_chords[c_bar : c_bar + spec.plant_bars] = src_chords
    else:  # pragma: no cover - guarded by validate()
        raise ValidationError(f"unknown plant kind {kind!r}")


def generate_corpus(spec: SynthSpec) -> tuple[list[MusicWork], list[AnnotationRow]]:
    """Generate works plus one annotation row per plant.

    Plant i copies a plant_bars passage from work 2i into work 2i+1; the
    row's aligned timestamp lists hold the downbeat times of every
    complete 4-bar window inside the passage, and each row gets a fresh
    pair_id / acoustic_index.
    """
    spec.validate()
    drafts = [_gen_draft(spec, i) for i in range(spec.n_works)]
    annotations: list[AnnotationRow] = []
    for plant_no in range(spec.n_plants):
        orig, comp = drafts[2 * plant_no], drafts[2 * plant_no + 1]
        rng = random.Random(f"{spec.seed}/plant/{plant_no}")
        max_bar = spec.bars_per_work - spec.plant_bars
        if spec.plant_location == "center":
            o_bar = c_bar = max_bar // 2
        else:
            o_bar = rng.randint(0, max_bar)
            c_bar = rng.randint(0, max_bar)
        _apply_plant(spec, plant_no, orig, comp, o_bar, c_bar, rng)

        stamps = spec.plant_bars - (DEFAULT_BAR_COUNT - 1)
        bpb = spec.beats_per_bar
        orig_grid_period = 60.0 / orig.tempo_bpm
        comp_grid_period = 60.0 / comp.tempo_bpm
        annotations.append(
            AnnotationRow(
                original_id=orig.music_id,
                comparison_id=comp.music_id,
                relation="plagiarism",
                original_times_sec=tuple(
                    (o_bar + j) * bpb * orig_grid_period for j in range(stamps)
                ),
                comparison_times_sec=tuple(
                    (c_bar + j) * bpb * comp_grid_period for j in range(stamps)
                ),
                pair_id=plant_no + 1,
                acoustic_index=plant_no + 1,
            )
        )
    return [_materialize(d) for d in drafts], annotations


def perturb_segment(
    work: MusicWork, start_sec: float, end_sec: float, p: float, seed: int
) -> MusicWork:
    """Delete each note with onset in [start_sec, end_sec) independently
    with probability p; beat grid and chords untouched.

    Uniforms come from a p-independent stream in note order, so deletion
    sets are nested across p for a fixed seed.
    """
    if not 0 <= p < 1:
        raise ValidationError(f"deletion probability must be in [0, 1) (got {p})")
    if start_sec < 0 or end_sec > work.time_bound_sec() or start_sec >= end_sec:
        raise ValidationError(
            f"span [{start_sec}, {end_sec}) outside work [0, {work.time_bound_sec():.6g})"
        )
    rng = random.Random(f"{seed}/perturb")
    kept = []
    for note in work.notes:
        if start_sec <= note.onset_sec < end_sec:
            if rng.random() < p:
                continue
        kept.append(note)
    return MusicWork(
        music_id=work.music_id,
        title=work.title,
        notes=tuple(kept),
        beat_grid=work.beat_grid,
        chords=work.chords,
        group_id=work.group_id,
    )
