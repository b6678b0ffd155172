"""Downbeat-aligned segmentation and feature rasterization.

A work is cut into overlapping 4-bar windows, one per downbeat that still
has four complete bars after it (stride = one bar). Each window is
rasterized onto a per-beat grid:

* PianoRoll  -- 128 x T binary matrix; cell (p, t) is set iff a note with
  pitch p sounds during any part of cell t. T = bars * beats_per_bar *
  cells_per_beat.
* OnsetVector -- length-T binary vector; cell t is set iff at least one
  note onset falls inside cell t (half-open cells, so a boundary onset
  counts once).
* ChordSequence -- one (root, quality) label per beat, sampled at the
  beat's midpoint; (None, "none") where no chord span covers it.

Cell boundaries are linear interpolations between consecutive *actual*
beat times, so variable tempo is handled per beat rather than by a fixed
seconds grid. All functions are pure; segments of many works can be
rasterized in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BeatGrid, MusicWork, TRACKS
from .errors import GridMismatchError, ValidationError

PITCH_DIM = 128
DEFAULT_CELLS_PER_BEAT = 4
DEFAULT_BAR_COUNT = 4

ChordLabel = tuple[int | None, str]
NO_CHORD: ChordLabel = (None, "none")

# Compact integer encoding of chord labels, used by the index arrays.
QUALITY_CODES = {"maj": 0, "min": 1, "none": 2}
QUALITY_NAMES = ("maj", "min", "none")

_TIME_EPS = 1e-9


@dataclass(frozen=True)
class GridParams:
    """Shape of the feature grid shared by every segment of an index."""

    beats_per_bar: int = 4
    cells_per_beat: int = DEFAULT_CELLS_PER_BEAT
    bar_count: int = DEFAULT_BAR_COUNT

    @property
    def beats(self) -> int:
        return self.bar_count * self.beats_per_bar

    @property
    def cells(self) -> int:
        return self.beats * self.cells_per_beat


@dataclass(eq=False)
class PianoRoll:
    """Binary pitch x time matrix (uint8 0/1), PITCH_DIM rows."""

    cells: np.ndarray
    cells_per_beat: int = DEFAULT_CELLS_PER_BEAT

    def __eq__(self, other) -> bool:
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return self.cells_per_beat == other.cells_per_beat and np.array_equal(
            self.cells, other.cells
        )

    def mass(self) -> int:
        """Number of set cells."""
        return int(self.cells.sum())


@dataclass(eq=False)
class OnsetVector:
    """Binary time vector (uint8 0/1) on the same cell grid as PianoRoll."""

    cells: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, OnsetVector):
            return NotImplemented
        return np.array_equal(self.cells, other.cells)

    def mass(self) -> int:
        return int(self.cells.sum())


@dataclass(frozen=True)
class ChordSequence:
    """Per-beat chord labels: (root 0-11 or None, quality)."""

    labels: tuple[ChordLabel, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(eq=False)
class Segment:
    """One downbeat-aligned 4-bar window of a work with its features.

    roll_union is derived: the element-wise OR of roll_melody and
    roll_vocal, computed on first access.
    """

    music_id: str
    start_sec: float
    end_sec: float
    bar_count: int
    roll_melody: PianoRoll
    roll_vocal: PianoRoll
    onsets: OnsetVector
    chords: ChordSequence
    _union: PianoRoll | None = field(default=None, repr=False, compare=False)

    @property
    def roll_union(self) -> PianoRoll:
        if self._union is None:
            self._union = PianoRoll(
                self.roll_melody.cells | self.roll_vocal.cells,
                self.roll_melody.cells_per_beat,
            )
        return self._union

    def __eq__(self, other) -> bool:
        if not isinstance(other, Segment):
            return NotImplemented
        return (
            self.music_id == other.music_id
            and self.start_sec == other.start_sec
            and self.end_sec == other.end_sec
            and self.bar_count == other.bar_count
            and self.roll_melody == other.roll_melody
            and self.roll_vocal == other.roll_vocal
            and self.onsets == other.onsets
            and self.chords == other.chords
        )

    def grid_signature(self) -> tuple[int, int, int]:
        """(bar_count, cells, beats) -- used for compatibility checks."""
        return (self.bar_count, int(self.roll_melody.cells.shape[1]), len(self.chords))


# ---------------------------------------------------------------------------
# grid geometry


def cell_boundaries(grid: BeatGrid, beat_lo: int, beat_hi: int, cells_per_beat: int) -> np.ndarray:
    """Cell boundary times covering beats [beat_lo, beat_hi).

    Returns (beat_hi - beat_lo) * cells_per_beat + 1 times: for each beat
    interval [t_j, t_{j+1}) the boundaries t_j + (t_{j+1}-t_j) * c/cpb for
    c = 0..cpb-1, plus the closing time t_{beat_hi}. One shared formula so
    full-work and per-window rasterization agree exactly.
    """
    times = np.asarray(grid.beat_times_sec, dtype=np.float64)
    if not 0 <= beat_lo < beat_hi <= len(times) - 1:
        raise ValueError(f"beat range [{beat_lo}, {beat_hi}] outside grid")
    starts = times[beat_lo:beat_hi]
    deltas = times[beat_lo + 1 : beat_hi + 1] - starts
    fracs = np.arange(cells_per_beat, dtype=np.float64) / cells_per_beat
    inner = starts[:, None] + deltas[:, None] * fracs[None, :]
    return np.append(inner.reshape(-1), times[beat_hi])


def _beat_index_at(grid: BeatGrid, t: float, what: str) -> int:
    times = grid.beat_times_sec
    for i, bt in enumerate(times):
        if abs(bt - t) <= _TIME_EPS:
            return i
    raise GridMismatchError(f"{what} {t!r}s is not a beat time of the grid")


def _window_beat_range(work: MusicWork, start_sec: float, end_sec: float, bar_count: int) -> tuple[int, int]:
    """Locate a bar-aligned window: both ends must be downbeats exactly
    bar_count bars apart."""
    grid = work.beat_grid
    lo = _beat_index_at(grid, start_sec, "window start")
    hi = _beat_index_at(grid, end_sec, "window end")
    if not grid.downbeat_flags[lo] or not grid.downbeat_flags[hi]:
        raise GridMismatchError(
            f"window [{start_sec}, {end_sec}) not bar-aligned: ends must be downbeats"
        )
    if hi - lo != bar_count * grid.beats_per_bar:
        raise GridMismatchError(
            f"window [{start_sec}, {end_sec}) spans {hi - lo} beats, "
            f"expected {bar_count * grid.beats_per_bar}"
        )
    return lo, hi


# ---------------------------------------------------------------------------
# rasterization over an arbitrary bar-aligned window


def _note_arrays(work: MusicWork, tracks: Sequence[str]):
    sel = [n for n in work.notes if n.track in tracks]
    onset = np.array([n.onset_sec for n in sel], dtype=np.float64)
    offset = np.array([n.onset_sec + n.duration_sec for n in sel], dtype=np.float64)
    pitch = np.array([n.pitch for n in sel], dtype=np.int64)
    return onset, offset, pitch


def _fill_roll(cells: np.ndarray, boundaries: np.ndarray, onset, offset, pitch) -> None:
    """Set cells (pitch, t) where note [onset, offset) overlaps cell t."""
    n_cells = cells.shape[1]
    if len(onset) == 0:
        return
    first = np.searchsorted(boundaries, onset, side="right") - 1
    last = np.searchsorted(boundaries, offset, side="left") - 1
    first = np.maximum(first, 0)
    last = np.minimum(last, n_cells - 1)
    keep = (offset > boundaries[0]) & (onset < boundaries[-1]) & (first <= last)
    for p, a, b in zip(pitch[keep], first[keep], last[keep]):
        cells[p, a : b + 1] = 1


def rasterize_pianoroll(
    work: MusicWork,
    start_sec: float,
    end_sec: float,
    tracks: Sequence[str] = TRACKS,
    cells_per_beat: int = DEFAULT_CELLS_PER_BEAT,
    bar_count: int = DEFAULT_BAR_COUNT,
) -> PianoRoll:
    """Rasterize the selected tracks over a bar-aligned window.

    Cell (p, t) = 1 iff some note with pitch p sounds during any part of
    cell t's half-open time interval.
    """
    lo, hi = _window_beat_range(work, start_sec, end_sec, bar_count)
    boundaries = cell_boundaries(work.beat_grid, lo, hi, cells_per_beat)
    cells = np.zeros((PITCH_DIM, len(boundaries) - 1), dtype=np.uint8)
    _fill_roll(cells, boundaries, *_note_arrays(work, tracks))
    return PianoRoll(cells, cells_per_beat)


def rasterize_onsets(
    work: MusicWork,
    start_sec: float,
    end_sec: float,
    cells_per_beat: int = DEFAULT_CELLS_PER_BEAT,
    bar_count: int = DEFAULT_BAR_COUNT,
) -> OnsetVector:
    """Mark cells containing at least one note onset (any track).

    Onsets before start_sec never count, even if the note sustains into
    the window; an onset exactly at end_sec is excluded (half-open).
    """
    lo, hi = _window_beat_range(work, start_sec, end_sec, bar_count)
    boundaries = cell_boundaries(work.beat_grid, lo, hi, cells_per_beat)
    cells = np.zeros(len(boundaries) - 1, dtype=np.uint8)
    onset, _, _ = _note_arrays(work, TRACKS)
    if len(onset):
        inside = (onset >= boundaries[0]) & (onset < boundaries[-1])
        idx = np.searchsorted(boundaries, onset[inside], side="right") - 1
        cells[idx] = 1
    return OnsetVector(cells)


def _chord_lookup(work: MusicWork, midpoints: np.ndarray) -> tuple[ChordLabel, ...]:
    spans = sorted(work.chords, key=lambda c: c.start_sec)
    starts = np.array([c.start_sec for c in spans], dtype=np.float64)
    labels: list[ChordLabel] = []
    for t in midpoints:
        i = int(np.searchsorted(starts, t, side="right")) - 1
        if i >= 0 and t < spans[i].end_sec:
            labels.append((spans[i].root, spans[i].quality))
        else:
            labels.append(NO_CHORD)
    return tuple(labels)


def rasterize_chords(
    work: MusicWork,
    start_sec: float,
    end_sec: float,
    bar_count: int = DEFAULT_BAR_COUNT,
) -> ChordSequence:
    """One label per beat: the chord span covering the beat's midpoint,
    (None, 'none') where uncovered."""
    lo, hi = _window_beat_range(work, start_sec, end_sec, bar_count)
    midpoints = np.array(
        [work.beat_grid.time_at_beat(j + 0.5) for j in range(lo, hi)], dtype=np.float64
    )
    return ChordSequence(_chord_lookup(work, midpoints))


def transpose(roll: PianoRoll, semitones: int) -> PianoRoll:
    """Shift pitch rows by `semitones`; rows leaving 0..127 are dropped."""
    if abs(semitones) > 24:
        raise ValueError(f"|semitones| must be <= 24 (got {semitones})")
    cells = roll.cells
    out = np.zeros_like(cells)
    if semitones == 0:
        out[:] = cells
    elif semitones > 0:
        out[semitones:, :] = cells[: PITCH_DIM - semitones, :]
    else:
        out[:semitones, :] = cells[-semitones:, :]
    return PianoRoll(out, roll.cells_per_beat)


# ---------------------------------------------------------------------------
# segment enumeration


def segment_starts(work: MusicWork, bar_count: int = DEFAULT_BAR_COUNT) -> list[int]:
    """Downbeat indices (into the downbeat list) that open a complete
    bar_count-bar window."""
    n = len(work.beat_grid.downbeat_indices())
    return list(range(max(0, n - bar_count)))


def enumerate_downbeat_segments(
    work: MusicWork, grid: GridParams | None = None
) -> list[Segment]:
    """All complete 4-bar windows of a work, ordered by start time.

    Rasterizes the whole work once per feature and slices windows out,
    which is equivalent to per-window rasterization because cell
    boundaries are per-beat. Fewer than bar_count+1 downbeats yields an
    empty list, not an error.
    """
    grid = grid or GridParams(beats_per_bar=work.beat_grid.beats_per_bar)
    if work.beat_grid.beats_per_bar != grid.beats_per_bar:
        raise GridMismatchError(
            f"work {work.music_id}: beats_per_bar {work.beat_grid.beats_per_bar} "
            f"!= grid {grid.beats_per_bar}"
        )
    beat_grid = work.beat_grid
    downbeats = beat_grid.downbeat_indices()
    starts = segment_starts(work, grid.bar_count)
    if not starts:
        return []

    n_beats = len(beat_grid.beat_times_sec)
    boundaries = cell_boundaries(beat_grid, 0, n_beats - 1, grid.cells_per_beat)
    full_melody = np.zeros((PITCH_DIM, len(boundaries) - 1), dtype=np.uint8)
    full_vocal = np.zeros_like(full_melody)
    _fill_roll(full_melody, boundaries, *_note_arrays(work, ("melody",)))
    _fill_roll(full_vocal, boundaries, *_note_arrays(work, ("vocal",)))
    full_onsets = np.zeros(len(boundaries) - 1, dtype=np.uint8)
    onset, _, _ = _note_arrays(work, TRACKS)
    if len(onset):
        inside = (onset >= boundaries[0]) & (onset < boundaries[-1])
        idx = np.searchsorted(boundaries, onset[inside], side="right") - 1
        full_onsets[idx] = 1
    midpoints = np.array(
        [beat_grid.time_at_beat(j + 0.5) for j in range(n_beats - 1)], dtype=np.float64
    )
    full_chords = _chord_lookup(work, midpoints)

    cpb = grid.cells_per_beat
    segments = []
    for i in starts:
        beat_lo = downbeats[i]
        beat_hi = downbeats[i + grid.bar_count]
        c0, c1 = beat_lo * cpb, beat_hi * cpb
        segments.append(
            Segment(
                music_id=work.music_id,
                start_sec=beat_grid.beat_times_sec[beat_lo],
                end_sec=beat_grid.beat_times_sec[beat_hi],
                bar_count=grid.bar_count,
                roll_melody=PianoRoll(full_melody[:, c0:c1].copy(), cpb),
                roll_vocal=PianoRoll(full_vocal[:, c0:c1].copy(), cpb),
                onsets=OnsetVector(full_onsets[c0:c1].copy()),
                chords=ChordSequence(full_chords[beat_lo:beat_hi]),
            )
        )
    return segments


def segment_at(work: MusicWork, start_sec: float, grid: GridParams | None = None) -> Segment:
    """Build the single segment whose window starts at the given downbeat."""
    grid = grid or GridParams(beats_per_bar=work.beat_grid.beats_per_bar)
    beat_grid = work.beat_grid
    lo = _beat_index_at(beat_grid, start_sec, "segment start")
    if not beat_grid.downbeat_flags[lo]:
        raise GridMismatchError(f"segment start {start_sec!r}s is not a downbeat")
    hi = lo + grid.bar_count * beat_grid.beats_per_bar
    if hi >= len(beat_grid.beat_times_sec) or not beat_grid.downbeat_flags[hi]:
        raise ValidationError(
            f"work {work.music_id}: no complete {grid.bar_count}-bar window at {start_sec!r}s"
        )
    end_sec = beat_grid.beat_times_sec[hi]
    return Segment(
        music_id=work.music_id,
        start_sec=start_sec,
        end_sec=end_sec,
        bar_count=grid.bar_count,
        roll_melody=rasterize_pianoroll(
            work, start_sec, end_sec, ("melody",), grid.cells_per_beat, grid.bar_count
        ),
        roll_vocal=rasterize_pianoroll(
            work, start_sec, end_sec, ("vocal",), grid.cells_per_beat, grid.bar_count
        ),
        onsets=rasterize_onsets(work, start_sec, end_sec, grid.cells_per_beat, grid.bar_count),
        chords=rasterize_chords(work, start_sec, end_sec, grid.bar_count),
    )


def snap_to_segment_start(
    work: MusicWork, t_sec: float, bar_count: int = DEFAULT_BAR_COUNT
) -> tuple[float, float]:
    """Nearest downbeat that opens a complete window, plus snap distance.

    Annotated timestamps are rasterized at the snapped downbeat while
    metric tolerance checks keep using the raw annotated second.
    """
    downbeat_times = work.beat_grid.downbeat_times()
    eligible = downbeat_times[: len(downbeat_times) - bar_count]
    if not eligible:
        raise ValidationError(
            f"work {work.music_id}: no complete {bar_count}-bar window exists"
        )
    best = min(eligible, key=lambda d: (abs(d - t_sec), d))
    return best, abs(best - t_sec)
