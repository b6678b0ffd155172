"""Searchable segment library: build, persist, query.

The index is an exhaustive, exact scorer: a query segment is compared
against every entry with `combined_similarity` semantics and the top-k is
returned under a total, documented ordering (score descending, then
music_id ascending, then start_sec ascending). The scan is vectorized --
union rolls live in one sparse matrix, onsets and chord labels in dense
arrays -- but every quantity is an integer count turned into a cosine the
same way the pairwise functions do it, so the vectorized ranking is
bit-identical to brute force.

File format (version 1)
------------------------
``magic(8) | version u32 | header_len u32 | header JSON | arrays | sha256``

The header carries grid params, weights, entry count and the music-id
table. Arrays follow in fixed order and dtype: per-entry music index
(int32), start/end seconds (float64), bit-packed melody and vocal rolls,
bit-packed onset vectors, chord roots (int8, -1 = none) and chord quality
codes (uint8). The trailing 32 bytes are the SHA-256 of everything before
them; persist() output is byte-identical for equal indexes.

Public API
----------
``build_index(works, weights, grid)``
``SegmentIndex.from_segments(segments, weights, grid)``
``persist(index, path)`` / ``load(path)``
``query_topk(index, query, k, exclude_music)`` / ``batch_query(...)``
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import MusicWork
from .errors import FormatError, GridMismatchError, ValidationError
from .segmenter import (
    PITCH_DIM,
    QUALITY_CODES,
    QUALITY_NAMES,
    ChordSequence,
    GridParams,
    OnsetVector,
    PianoRoll,
    Segment,
    enumerate_downbeat_segments,
)
from .similarity import (
    DEFAULT_WEIGHTS,
    FacetScores,
    SHIFT_PREFERENCE,
    SimilarityWeights,
    combined_similarity,
)

logger = logging.getLogger(__name__)

MAGIC = b"\x93SEGIDX\n"
VERSION = 1


@dataclass(frozen=True)
class RetrievalHit:
    """One ranked match for a query segment."""

    entry_id: int
    music_id: str
    start_sec: float
    score: float
    facets: FacetScores
    rank: int


class _EntryView(Sequence[Segment]):
    """Lazy sequence of the index's segments (materialized per access)."""

    def __init__(self, index: "SegmentIndex"):
        self._index = index

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self._index.entry(j) for j in range(*i.indices(len(self)))]
        return self._index.entry(int(i))


class SegmentIndex:
    """Immutable library of segments with dense integer entry ids.

    Entries are stored column-wise (struct of arrays, rolls bit-packed) so
    a full-scale library stays small; `entry(i)` materializes a Segment on
    demand and `entries` is a lazy sequence view.
    """

    def __init__(
        self,
        grid: GridParams,
        weights: SimilarityWeights,
        music_ids: list[str],
        entry_music: np.ndarray,
        start_sec: np.ndarray,
        end_sec: np.ndarray,
        melody_bits: np.ndarray,
        vocal_bits: np.ndarray,
        onset_bits: np.ndarray,
        chord_roots: np.ndarray,
        chord_quals: np.ndarray,
    ):
        self.grid = grid
        self.weights = weights
        self.music_ids = music_ids
        self._entry_music = entry_music
        self._start = start_sec
        self._end = end_sec
        self._melody_bits = melody_bits
        self._vocal_bits = vocal_bits
        self._onset_bits = onset_bits
        self._chord_roots = chord_roots
        self._chord_quals = chord_quals
        self.by_music = self._music_ranges()
        self._search: dict | None = None

    # -- construction -------------------------------------------------

    @classmethod
    def from_segments(
        cls,
        segments: Sequence[Segment],
        weights: SimilarityWeights = DEFAULT_WEIGHTS,
        grid: GridParams | None = None,
    ) -> "SegmentIndex":
        grid = grid or GridParams()
        weights = weights.normalized()
        n = len(segments)
        expected = (grid.bar_count, grid.cells, grid.beats)
        roll_width = _packed_width(PITCH_DIM * grid.cells)
        onset_width = _packed_width(grid.cells)

        music_ids: list[str] = []
        music_pos: dict[str, int] = {}
        entry_music = np.zeros(n, dtype=np.int32)
        start = np.zeros(n, dtype=np.float64)
        end = np.zeros(n, dtype=np.float64)
        melody_bits = np.zeros((n, roll_width), dtype=np.uint8)
        vocal_bits = np.zeros((n, roll_width), dtype=np.uint8)
        onset_bits = np.zeros((n, onset_width), dtype=np.uint8)
        roots = np.zeros((n, grid.beats), dtype=np.int8)
        quals = np.zeros((n, grid.beats), dtype=np.uint8)

        for i, seg in enumerate(segments):
            if seg.grid_signature() != expected:
                raise GridMismatchError(
                    f"entry {i}: grid {seg.grid_signature()} != index grid {expected}"
                )
            if seg.music_id not in music_pos:
                music_pos[seg.music_id] = len(music_ids)
                music_ids.append(seg.music_id)
            entry_music[i] = music_pos[seg.music_id]
            start[i] = seg.start_sec
            end[i] = seg.end_sec
            melody_bits[i] = np.packbits(seg.roll_melody.cells.reshape(-1))
            vocal_bits[i] = np.packbits(seg.roll_vocal.cells.reshape(-1))
            onset_bits[i] = np.packbits(seg.onsets.cells)
            roots[i] = [(-1 if r is None else r) for r, _ in seg.chords.labels]
            quals[i] = [QUALITY_CODES[q] for _, q in seg.chords.labels]

        for i in range(1, n):
            prev, cur = entry_music[i - 1], entry_music[i]
            if cur != prev and cur in entry_music[:i]:
                raise ValidationError(
                    f"entries of music {music_ids[cur]!r} are not contiguous"
                )

        return cls(
            grid, weights, music_ids, entry_music, start, end,
            melody_bits, vocal_bits, onset_bits, roots, quals,
        )

    # -- basic accessors ----------------------------------------------

    def __len__(self) -> int:
        return len(self._entry_music)

    @property
    def entries(self) -> Sequence[Segment]:
        return _EntryView(self)

    def entry(self, i: int) -> Segment:
        if not 0 <= i < len(self):
            raise IndexError(f"entry id {i} out of range 0..{len(self) - 1}")
        cells = self.grid.cells
        melody = np.unpackbits(self._melody_bits[i], count=PITCH_DIM * cells)
        vocal = np.unpackbits(self._vocal_bits[i], count=PITCH_DIM * cells)
        labels = tuple(
            ((None if r < 0 else int(r)), QUALITY_NAMES[q])
            for r, q in zip(self._chord_roots[i], self._chord_quals[i])
        )
        return Segment(
            music_id=self.music_ids[self._entry_music[i]],
            start_sec=float(self._start[i]),
            end_sec=float(self._end[i]),
            bar_count=self.grid.bar_count,
            roll_melody=PianoRoll(melody.reshape(PITCH_DIM, cells), self.grid.cells_per_beat),
            roll_vocal=PianoRoll(vocal.reshape(PITCH_DIM, cells), self.grid.cells_per_beat),
            onsets=OnsetVector(np.unpackbits(self._onset_bits[i], count=cells)),
            chords=ChordSequence(labels),
        )

    def _music_ranges(self) -> dict[str, range]:
        ranges: dict[str, range] = {}
        n = len(self._entry_music)
        i = 0
        while i < n:
            j = i
            while j < n and self._entry_music[j] == self._entry_music[i]:
                j += 1
            ranges[self.music_ids[self._entry_music[i]]] = range(i, j)
            i = j
        return ranges

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegmentIndex):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.weights == other.weights
            and self.music_ids == other.music_ids
            and np.array_equal(self._entry_music, other._entry_music)
            and np.array_equal(self._start, other._start)
            and np.array_equal(self._end, other._end)
            and np.array_equal(self._melody_bits, other._melody_bits)
            and np.array_equal(self._vocal_bits, other._vocal_bits)
            and np.array_equal(self._onset_bits, other._onset_bits)
            and np.array_equal(self._chord_roots, other._chord_roots)
            and np.array_equal(self._chord_quals, other._chord_quals)
        )

    # -- serialization ------------------------------------------------

    def _payload(self) -> bytes:
        header = {
            "bar_count": self.grid.bar_count,
            "beats_per_bar": self.grid.beats_per_bar,
            "cells_per_beat": self.grid.cells_per_beat,
            "entry_count": len(self),
            "music_ids": self.music_ids,
            "weights": list(self.weights.as_tuple()),
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<I", VERSION))
        out.write(struct.pack("<I", len(blob)))
        out.write(blob)
        for arr in (
            self._entry_music, self._start, self._end,
            self._melody_bits, self._vocal_bits, self._onset_bits,
            self._chord_roots, self._chord_quals,
        ):
            out.write(arr.tobytes(order="C"))
        return out.getvalue()

    def content_digest(self) -> str:
        """SHA-256 hex digest of the serialized payload (equals the file
        checksum written by persist)."""
        return hashlib.sha256(self._payload()).hexdigest()

    def segment_count_by_music(self) -> dict[str, int]:
        return {m: len(r) for m, r in self.by_music.items()}

    # -- search arrays --------------------------------------------------

    def _search_arrays(self) -> dict:
        if self._search is not None:
            return self._search
        n = len(self)
        cells = self.grid.cells
        dim = PITCH_DIM * cells

        rows, cols = [], []
        row_counts = np.zeros((n, PITCH_DIM), dtype=np.int64)
        for i in range(n):
            union = np.unpackbits(self._melody_bits[i], count=dim) | np.unpackbits(
                self._vocal_bits[i], count=dim
            )
            (set_cells,) = np.nonzero(union)
            rows.append(np.full(len(set_cells), i, dtype=np.int32))
            cols.append(set_cells.astype(np.int32))
            np.add.at(row_counts[i], set_cells // cells, 1)
        row_idx = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int32)
        col_idx = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int32)
        roll_csr = sparse.csr_matrix(
            (np.ones(len(row_idx), dtype=np.float64), (row_idx, col_idx)),
            shape=(n, dim),
        )
        roll_mass = row_counts.sum(axis=1)
        # low_cum[:, j] = set cells with pitch row < j  (for shift clipping)
        low_cum = np.zeros((n, PITCH_DIM + 1), dtype=np.int64)
        np.cumsum(row_counts, axis=1, out=low_cum[:, 1:])

        onsets = np.zeros((n, cells), dtype=np.float64)
        for i in range(n):
            onsets[i] = np.unpackbits(self._onset_bits[i], count=cells)
        onset_mass = onsets.sum(axis=1).astype(np.int64)

        order = sorted(
            range(n),
            key=lambda i: (self.music_ids[self._entry_music[i]], self._start[i], i),
        )
        tie_rank = np.empty(n, dtype=np.int64)
        tie_rank[order] = np.arange(n)

        self._search = {
            "roll_csr": roll_csr,
            "roll_mass": roll_mass,
            "low_cum": low_cum,
            "onsets": onsets,
            "onset_mass": onset_mass,
            "roots": self._chord_roots.astype(np.int64),
            "quals": self._chord_quals.astype(np.int64),
            "tie_rank": tie_rank,
        }
        return self._search

    def _shifted_mass(self, shift: int) -> np.ndarray:
        """Per-entry set-cell count of the union roll after transposing it
        by `shift` (rows leaving 0..127 drop their cells)."""
        arrays = self._search_arrays()
        mass, low_cum = arrays["roll_mass"], arrays["low_cum"]
        if shift > 0:
            clipped = mass - low_cum[:, PITCH_DIM - shift]
        elif shift < 0:
            clipped = low_cum[:, -shift]
        else:
            clipped = 0
        return mass - clipped

    def _score_all(self, query: Segment) -> np.ndarray:
        """Combined similarity of the query against every entry.

        Bit-identical to looping `combined_similarity` because every
        intermediate is an exact integer count and the float expression
        tree matches the pairwise one.
        """
        arrays = self._search_arrays()
        n = len(self)
        w = self.weights
        if n == 0:
            return np.zeros(0, dtype=np.float64)

        q_onset = query.onsets.cells.astype(np.float64)
        q_onset_mass = query.onsets.mass()
        inter_onset = arrays["onsets"] @ q_onset
        prod = (q_onset_mass * arrays["onset_mass"]).astype(np.float64)
        denom = np.sqrt(prod)
        onset_scores = np.divide(
            inter_onset, denom, out=np.zeros(n, dtype=np.float64), where=denom > 0
        )
        if q_onset_mass == 0:
            onset_scores = np.where(arrays["onset_mass"] == 0, 1.0, 0.0)
        else:
            onset_scores = np.where(arrays["onset_mass"] == 0, 0.0, onset_scores)

        # dot(q, transpose(entry, s)) == dot(transpose(q, -s), entry)
        dim = PITCH_DIM * self.grid.cells
        from .segmenter import transpose as _transpose

        shifted_queries = np.zeros((dim, len(SHIFT_PREFERENCE)), dtype=np.float64)
        for col, shift in enumerate(SHIFT_PREFERENCE):
            shifted_queries[:, col] = _transpose(query.roll_union, -shift).cells.reshape(-1)
        inter_roll = arrays["roll_csr"] @ shifted_queries  # (n, shifts), exact ints
        q_mass = query.roll_union.mass()

        q_roots = np.array(
            [(-1 if r is None else r) for r, _ in query.chords.labels], dtype=np.int64
        )
        q_quals = np.array([QUALITY_CODES[q] for _, q in query.chords.labels], dtype=np.int64)
        roots, quals = arrays["roots"], arrays["quals"]
        entry_real = roots >= 0
        both_none = (~entry_real) & (q_roots[None, :] < 0)
        qual_match = quals == q_quals[None, :]
        beats = self.grid.beats

        best = np.full(n, -1.0, dtype=np.float64)
        for col, shift in enumerate(SHIFT_PREFERENCE):
            entry_mass = self._shifted_mass(shift)
            prod = (q_mass * entry_mass).astype(np.float64)
            denom = np.sqrt(prod)
            pr = np.divide(
                inter_roll[:, col], denom, out=np.zeros(n, dtype=np.float64), where=denom > 0
            )
            if q_mass == 0:
                pr = np.where(entry_mass == 0, 1.0, 0.0)
            else:
                pr = np.where(entry_mass == 0, 0.0, pr)

            shifted_roots = np.where(entry_real, (roots + shift) % 12, -1)
            root_match = entry_real & (q_roots[None, :] >= 0) & (shifted_roots == q_roots[None, :])
            per_beat = np.where(
                root_match & qual_match,
                1.0,
                np.where(root_match | both_none, 0.5, 0.0),
            )
            ch = per_beat.sum(axis=1) / beats

            score = w.w_pianoroll * pr + w.w_onset * onset_scores + w.w_chord * ch
            improved = score > best
            best[improved] = score[improved]
        return best


def _packed_width(bits: int) -> int:
    return (bits + 7) // 8


# ---------------------------------------------------------------------------
# build / persist / load


def build_index(
    works: Sequence[MusicWork],
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    grid: GridParams | None = None,
) -> SegmentIndex:
    """Index every complete 4-bar window of every work.

    Entry order is deterministic: works in list order, segments by start
    time. Duplicate music ids and beats_per_bar mismatches are rejected.
    """
    grid = grid or GridParams()
    seen: set[str] = set()
    segments: list[Segment] = []
    for work in works:
        if work.music_id in seen:
            raise ValidationError(f"duplicate music_id {work.music_id!r}")
        seen.add(work.music_id)
        segments.extend(enumerate_downbeat_segments(work, grid))
    if not segments and works:
        logger.warning("no eligible segments in %d works; index is empty", len(works))
    return SegmentIndex.from_segments(segments, weights, grid)


def persist(index: SegmentIndex, path: str | Path) -> None:
    """Write the versioned binary container with trailing SHA-256."""
    payload = index._payload()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load(path: str | Path) -> SegmentIndex:
    """Read an index file; load(persist(x)) == x structurally."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + 32:
        raise FormatError(f"{path}: corrupt index file (truncated)")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a segment index file (bad magic)")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: index version mismatch (file {version}, supported {VERSION})")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError(f"{path}: corrupt index file (checksum mismatch)")

    pos = len(MAGIC) + 4
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt index header: {exc}") from exc
    pos += header_len

    grid = GridParams(
        beats_per_bar=header["beats_per_bar"],
        cells_per_beat=header["cells_per_beat"],
        bar_count=header["bar_count"],
    )
    weights = SimilarityWeights(*header["weights"])
    n = header["entry_count"]
    roll_width = _packed_width(PITCH_DIM * grid.cells)
    onset_width = _packed_width(grid.cells)

    def take(dtype, shape) -> np.ndarray:
        nonlocal pos
        count = int(np.prod(shape)) if shape else 1
        nbytes = np.dtype(dtype).itemsize * count
        if pos + nbytes > len(payload):
            raise FormatError(f"{path}: corrupt index file (array data truncated)")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += nbytes
        return arr.copy()

    entry_music = take(np.int32, (n,))
    start = take(np.float64, (n,))
    end = take(np.float64, (n,))
    melody_bits = take(np.uint8, (n, roll_width))
    vocal_bits = take(np.uint8, (n, roll_width))
    onset_bits = take(np.uint8, (n, onset_width))
    roots = take(np.int8, (n, grid.beats))
    quals = take(np.uint8, (n, grid.beats))
    if pos != len(payload):
        raise FormatError(f"{path}: corrupt index file ({len(payload) - pos} trailing bytes)")

    return SegmentIndex(
        grid, weights, list(header["music_ids"]), entry_music, start, end,
        melody_bits, vocal_bits, onset_bits, roots, quals,
    )


# ---------------------------------------------------------------------------
# querying


def query_topk(
    index: SegmentIndex,
    query: Segment,
    k: int,
    exclude_music: Iterable[str] = (),
) -> list[RetrievalHit]:
    """The k best entries for a query segment, exact and deterministic.

    Ranked by combined score descending; ties broken by music_id
    ascending, then start_sec ascending. Entries of excluded musics are
    filtered before ranking. Fewer than k hits are returned when the
    library is smaller.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1 (got {k})")
    expected = (index.grid.bar_count, index.grid.cells, index.grid.beats)
    if query.grid_signature() != expected:
        raise GridMismatchError(
            f"query grid {query.grid_signature()} != index grid {expected}"
        )
    n = len(index)
    if n == 0:
        return []
    excluded = set(exclude_music)
    if excluded:
        music_excluded = np.array([m in excluded for m in index.music_ids])
        keep = ~music_excluded[index._entry_music]
        candidates = np.flatnonzero(keep)
    else:
        candidates = np.arange(n)
    if len(candidates) == 0:
        return []

    scores = index._score_all(query)
    arrays = index._search_arrays()
    order = np.lexsort((arrays["tie_rank"][candidates], -scores[candidates]))
    top = candidates[order[: min(k, len(candidates))]]

    hits = []
    for rank, eid in enumerate(top, 1):
        entry = index.entry(int(eid))
        score, facets = combined_similarity(query, entry, index.weights)
        hits.append(
            RetrievalHit(
                entry_id=int(eid),
                music_id=entry.music_id,
                start_sec=entry.start_sec,
                score=score,
                facets=facets,
                rank=rank,
            )
        )
    return hits


def batch_query(
    index: SegmentIndex,
    queries: Sequence[Segment],
    k: int,
    exclude_music: Iterable[str] = (),
) -> list[list[RetrievalHit]]:
    """query_topk per query, results aligned with the query order."""
    excluded = set(exclude_music)
    return [query_topk(index, q, k, excluded) for q in queries]
