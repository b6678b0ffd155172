"""Transcribed-work corpus: canonical input schemas, parsing, validation.

The engine starts where a transcription stack ends: every work arrives as
note events (melody and vocal tracks), a beat grid with downbeat flags, and
chord spans. Two file formats are defined here:

Corpus file
    JSON Lines, one work object per line, so large libraries stream.
    Schema mirrors :class:`MusicWork`; all times are seconds.

Annotation file
    CSV with header
    ``original_title,comparison_title,relation,original_time,comparison_time,pair_id,acoustic_index``
    where the two time columns are bracketed comma-separated second lists,
    e.g. ``"[73, 82, 134]"``. The two lists of a row are position-aligned:
    entry j of ``original_time`` corresponds to entry j of
    ``comparison_time`` within the same acoustic index.

Invariants are documented on the types but enforced by the parsers and by
:func:`validate_work`, not at construction time, so tests can build broken
values on purpose.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, ValidationError

TRACKS = ("melody", "vocal")
QUALITIES = ("maj", "min", "none")
RELATIONS = ("plagiarism", "remake")

ANNOTATION_HEADER = (
    "original_title",
    "comparison_title",
    "relation",
    "original_time",
    "comparison_time",
    "pair_id",
    "acoustic_index",
)


@dataclass(frozen=True)
class NoteEvent:
    """One transcribed note.

    Invariants: onset_sec >= 0, duration_sec > 0, 0 <= pitch <= 127,
    track in TRACKS.
    """

    onset_sec: float
    duration_sec: float
    pitch: int
    track: str


@dataclass(frozen=True)
class ChordSpan:
    """One transcribed chord over [start_sec, end_sec).

    root is a pitch class 0-11 or None; quality in QUALITIES.
    root is None exactly when quality == "none".
    """

    start_sec: float
    end_sec: float
    root: int | None
    quality: str


@dataclass(frozen=True)
class BeatGrid:
    """Beat-tracker output: beat times plus downbeat flags.

    beat_times_sec is strictly increasing; downbeat_flags has the same
    length, at least one True entry, and True entries repeat every
    beats_per_bar positions once the first True entry is fixed.
    """

    beat_times_sec: tuple[float, ...]
    downbeat_flags: tuple[bool, ...]
    beats_per_bar: int

    def downbeat_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.downbeat_flags) if f]

    def downbeat_times(self) -> list[float]:
        return [self.beat_times_sec[i] for i in self.downbeat_indices()]

    def time_at_beat(self, beat: float) -> float:
        """Time of a fractional beat position, linearly interpolated.

        Integral positions return the stored beat time exactly; fractional
        positions interpolate within the surrounding beat interval. This is
        the single source of truth for beat->time conversion, shared with
        the rasterizer so cell boundaries and generated onsets agree
        bit-for-bit.
        """
        times = self.beat_times_sec
        if beat < 0 or beat > len(times) - 1:
            raise ValueError(f"beat position {beat} outside grid")
        j = int(beat)
        frac = beat - j
        if frac == 0.0:
            return times[j]
        return times[j] + (times[j + 1] - times[j]) * frac

    def bar_duration_sec(self) -> float:
        """Duration of one bar extrapolated from the last beat interval."""
        times = self.beat_times_sec
        if len(times) < 2:
            return 0.0
        return self.beats_per_bar * (times[-1] - times[-2])


@dataclass(frozen=True)
class MusicWork:
    """A transcribed piece: notes per track, beat grid, chord spans."""

    music_id: str
    title: str
    notes: tuple[NoteEvent, ...]
    beat_grid: BeatGrid
    chords: tuple[ChordSpan, ...]
    group_id: str | None = None

    def time_bound_sec(self) -> float:
        """Upper bound for note/chord times: last beat + one bar."""
        return self.beat_grid.beat_times_sec[-1] + self.beat_grid.bar_duration_sec()


@dataclass(frozen=True)
class AnnotationRow:
    """One ground-truth row: an aligned timestamp list pair for one
    recurring similar pattern (acoustic index) within a work pair."""

    original_id: str
    comparison_id: str
    relation: str
    original_times_sec: tuple[float, ...]
    comparison_times_sec: tuple[float, ...]
    pair_id: int
    acoustic_index: int


# ---------------------------------------------------------------------------
# validation


def validate_work(work: MusicWork) -> list[str]:
    """Check every MusicWork invariant; return violation messages.

    An empty list means the work is valid. Never raises and never mutates.
    """
    problems: list[str] = []
    grid = work.beat_grid
    times = grid.beat_times_sec

    if not work.music_id:
        problems.append("music_id must be non-empty")
    if grid.beats_per_bar < 1:
        problems.append(f"beats_per_bar must be >= 1 (got {grid.beats_per_bar})")
    if len(times) == 0:
        problems.append("beat grid is empty")
    for j in range(1, len(times)):
        if not times[j] > times[j - 1]:
            problems.append(f"beat_times_sec not strictly increasing at index {j}")
            break
    if len(grid.downbeat_flags) != len(times):
        problems.append(
            f"downbeat_flags length {len(grid.downbeat_flags)} != beat count {len(times)}"
        )
    else:
        flagged = grid.downbeat_indices()
        if not flagged:
            problems.append("no downbeat flagged")
        elif grid.beats_per_bar >= 1:
            first = flagged[0]
            for i, flag in enumerate(grid.downbeat_flags):
                expected = i >= first and (i - first) % grid.beats_per_bar == 0
                if flag != expected:
                    problems.append(f"downbeat period mismatch at beat {i}")
                    break

    bound = work.time_bound_sec() if times else 0.0
    for i, note in enumerate(work.notes):
        if note.onset_sec < 0:
            problems.append(f"note {i}: onset_sec must be >= 0 (got {note.onset_sec})")
        if not note.duration_sec > 0:
            problems.append(f"note {i}: duration_sec must be > 0 (got {note.duration_sec})")
        if not 0 <= note.pitch <= 127:
            problems.append(f"note {i}: pitch out of range (got {note.pitch})")
        if note.track not in TRACKS:
            problems.append(f"note {i}: unknown track {note.track!r}")
        if times and note.onset_sec + note.duration_sec > bound:
            problems.append(f"note {i}: extends past time bound {bound:.6g}s")

    for i, span in enumerate(work.chords):
        if not span.start_sec < span.end_sec:
            problems.append(f"chord {i}: start_sec must be < end_sec")
        if span.quality not in QUALITIES:
            problems.append(f"chord {i}: unknown quality {span.quality!r}")
        if (span.root is None) != (span.quality == "none"):
            problems.append(f"chord {i}: root is None exactly when quality is 'none'")
        if span.root is not None and not 0 <= span.root <= 11:
            problems.append(f"chord {i}: root out of range (got {span.root})")
        if span.start_sec < 0 or (times and span.end_sec > bound):
            problems.append(f"chord {i}: falls outside [0, {bound:.6g}]s")

    order = sorted(range(len(work.chords)), key=lambda i: work.chords[i].start_sec)
    for a, b in zip(order, order[1:]):
        if work.chords[b].start_sec < work.chords[a].end_sec:
            problems.append(
                f"chords {a} and {b} overlap "
                f"([{work.chords[a].start_sec:.6g}, {work.chords[a].end_sec:.6g}) vs "
                f"[{work.chords[b].start_sec:.6g}, {work.chords[b].end_sec:.6g}))"
            )

    return problems


# ---------------------------------------------------------------------------
# corpus file (JSON Lines)


def work_to_record(work: MusicWork) -> dict:
    """JSON-serializable record for one work (canonical field order)."""
    return {
        "music_id": work.music_id,
        "title": work.title,
        "group_id": work.group_id,
        "beat_grid": {
            "beat_times_sec": list(work.beat_grid.beat_times_sec),
            "downbeat_flags": list(work.beat_grid.downbeat_flags),
            "beats_per_bar": work.beat_grid.beats_per_bar,
        },
        "notes": [
            {
                "onset_sec": n.onset_sec,
                "duration_sec": n.duration_sec,
                "pitch": n.pitch,
                "track": n.track,
            }
            for n in work.notes
        ],
        "chords": [
            {
                "start_sec": c.start_sec,
                "end_sec": c.end_sec,
                "root": c.root,
                "quality": c.quality,
            }
            for c in work.chords
        ],
    }


_WORK_KEYS = {"music_id", "title", "group_id", "beat_grid", "notes", "chords"}


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise FormatError(f"{context}: missing field {key!r}")
    return record[key]


def work_from_record(record: dict, context: str = "record") -> MusicWork:
    """Build a MusicWork from a parsed JSON record (schema errors only;
    invariant checks are validate_work's job)."""
    if not isinstance(record, dict):
        raise FormatError(f"{context}: work record must be an object")
    unknown = set(record) - _WORK_KEYS
    if unknown:
        raise FormatError(f"{context}: unknown fields {sorted(unknown)}")
    grid_rec = _require(record, "beat_grid", context)
    try:
        grid = BeatGrid(
            beat_times_sec=tuple(float(t) for t in grid_rec["beat_times_sec"]),
            downbeat_flags=tuple(bool(f) for f in grid_rec["downbeat_flags"]),
            beats_per_bar=int(grid_rec["beats_per_bar"]),
        )
        notes = tuple(
            NoteEvent(
                onset_sec=float(n["onset_sec"]),
                duration_sec=float(n["duration_sec"]),
                pitch=int(n["pitch"]),
                track=str(n["track"]),
            )
            for n in _require(record, "notes", context)
        )
        chords = tuple(
            ChordSpan(
                start_sec=float(c["start_sec"]),
                end_sec=float(c["end_sec"]),
                root=None if c["root"] is None else int(c["root"]),
                quality=str(c["quality"]),
            )
            for c in _require(record, "chords", context)
        )
        return MusicWork(
            music_id=str(_require(record, "music_id", context)),
            title=str(_require(record, "title", context)),
            notes=notes,
            beat_grid=grid,
            chords=chords,
            group_id=None if record.get("group_id") is None else str(record["group_id"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{context}: malformed work record: {exc}") from exc


def parse_corpus(path: str | Path) -> list[MusicWork]:
    """Parse a JSON-Lines corpus file, validating every invariant.

    Order-preserving: record i in the file is element i of the result.
    Raises FormatError for malformed records (with line number) and
    ValidationError for invariant violations or duplicate music ids.
    """
    works: list[MusicWork] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            context = f"{path}: line {lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{context}: invalid record: {exc}") from exc
            work = work_from_record(record, context)
            problems = validate_work(work)
            if problems:
                raise ValidationError(f"{context}: " + "; ".join(problems))
            if work.music_id in seen:
                raise ValidationError(
                    f"{context}: duplicate music_id {work.music_id!r} "
                    f"(first seen on line {seen[work.music_id]})"
                )
            seen[work.music_id] = lineno
            works.append(work)
    return works


def write_corpus(works: Iterable[MusicWork], path: str | Path) -> None:
    """Write works as JSON Lines; canonical formatting so rewrites are
    byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        for work in works:
            fh.write(json.dumps(work_to_record(work), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# annotation file (CSV)


def _format_seconds(t: float) -> str:
    return str(int(t)) if t == int(t) else repr(t)


def _parse_time_list(text: str, context: str) -> tuple[float, ...]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise FormatError(f"{context}: time list must be bracketed (got {text!r})")
    inner = text[1:-1].strip()
    if not inner:
        raise FormatError(f"{context}: time list must contain at least one value")
    values = []
    for token in inner.split(","):
        token = token.strip()
        try:
            values.append(float(token))
        except ValueError as exc:
            raise FormatError(f"{context}: non-numeric time {token!r}") from exc
    return tuple(values)


def title_index(works: Sequence[MusicWork]) -> dict[str, list[str]]:
    """Map title -> all music ids carrying it (collisions kept visible)."""
    out: dict[str, list[str]] = {}
    for work in works:
        out.setdefault(work.title, []).append(work.music_id)
    return out


def parse_annotations(
    path: str | Path, works: Sequence[MusicWork] | None = None
) -> list[AnnotationRow]:
    """Parse a ground-truth annotation CSV.

    When `works` is given, title columns are resolved to music ids; a title
    matching zero or multiple works raises ValidationError listing every
    offending title. Without `works`, titles pass through as ids.
    """
    rows: list[AnnotationRow] = []
    seen_acoustic: dict[int, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty annotation file") from None
        if tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise FormatError(
                f"{path}: header must be {','.join(ANNOTATION_HEADER)} (got {','.join(header)})"
            )
        for lineno, fields in enumerate(reader, 2):
            if not fields:
                continue
            context = f"{path}: line {lineno}"
            if len(fields) != len(ANNOTATION_HEADER):
                raise FormatError(
                    f"{context}: expected {len(ANNOTATION_HEADER)} fields, got {len(fields)}"
                )
            orig_title, comp_title, relation, orig_time, comp_time, pair_id, acoustic = fields
            relation = relation.strip().lower()
            if relation not in RELATIONS:
                raise FormatError(f"{context}: unknown relation value {fields[2]!r}")
            orig_times = _parse_time_list(orig_time, context)
            comp_times = _parse_time_list(comp_time, context)
            if len(orig_times) != len(comp_times):
                raise ValidationError(
                    f"{context}: time list length mismatch "
                    f"({len(orig_times)} original vs {len(comp_times)} comparison)"
                )
            for name, values in (("original", orig_times), ("comparison", comp_times)):
                if any(b <= a for a, b in zip(values, values[1:])):
                    raise ValidationError(f"{context}: {name} times not ascending")
            try:
                pair = int(pair_id)
                ac = int(acoustic)
            except ValueError as exc:
                raise FormatError(f"{context}: pair_id/acoustic_index must be integers") from exc
            if ac in seen_acoustic:
                raise ValidationError(
                    f"{context}: acoustic_index {ac} already used on line {seen_acoustic[ac]}"
                )
            seen_acoustic[ac] = lineno
            rows.append(
                AnnotationRow(
                    original_id=orig_title.strip(),
                    comparison_id=comp_title.strip(),
                    relation=relation,
                    original_times_sec=orig_times,
                    comparison_times_sec=comp_times,
                    pair_id=pair,
                    acoustic_index=ac,
                )
            )
    if works is not None:
        rows = resolve_annotation_titles(rows, works)
    return rows


def resolve_annotation_titles(
    rows: Sequence[AnnotationRow], works: Sequence[MusicWork]
) -> list[AnnotationRow]:
    """Replace title references with music ids, erroring on unknown or
    ambiguous titles (all offenders listed at once)."""
    index = title_index(works)
    unresolved: list[str] = []
    ambiguous: list[str] = []
    resolved: list[AnnotationRow] = []
    for row in rows:
        ids = []
        for title in (row.original_id, row.comparison_id):
            matches = index.get(title, [])
            if not matches:
                if title not in unresolved:
                    unresolved.append(title)
                ids.append(title)
            elif len(matches) > 1:
                if title not in ambiguous:
                    ambiguous.append(title)
                ids.append(title)
            else:
                ids.append(matches[0])
        resolved.append(
            AnnotationRow(
                original_id=ids[0],
                comparison_id=ids[1],
                relation=row.relation,
                original_times_sec=row.original_times_sec,
                comparison_times_sec=row.comparison_times_sec,
                pair_id=row.pair_id,
                acoustic_index=row.acoustic_index,
            )
        )
    problems = []
    if unresolved:
        problems.append("unresolved titles: " + ", ".join(repr(t) for t in unresolved))
    if ambiguous:
        problems.append("ambiguous titles: " + ", ".join(repr(t) for t in ambiguous))
    if problems:
        raise ValidationError("; ".join(problems))
    return resolved


def write_annotations(
    rows: Iterable[AnnotationRow],
    path: str | Path,
    works: Sequence[MusicWork] | None = None,
) -> None:
    """Write annotation rows as CSV; ids are mapped back to titles when a
    works list is given. Formatting is canonical so rewrites are
    byte-identical."""
    id_to_title = {w.music_id: w.title for w in works} if works else {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for row in rows:
            writer.writerow(
                [
                    id_to_title.get(row.original_id, row.original_id),
                    id_to_title.get(row.comparison_id, row.comparison_id),
                    row.relation,
                    "[" + ", ".join(_format_seconds(t) for t in row.original_times_sec) + "]",
                    "[" + ", ".join(_format_seconds(t) for t in row.comparison_times_sec) + "]",
                    row.pair_id,
                    row.acoustic_index,
                ]
            )
