"""Evaluation protocol: temporal-precision recall, mAP and MR1.

Segment level: annotation rows are split into folds by pair id (seeded
shuffle). Per fold, a library is built from the fold's comparison works in
one of three configurations, one query is issued per annotated original
timestamp, and a query counts as recalled at k when a top-k hit lands on
the correct work within the temporal tolerance of the aligned comparison
timestamp.

Library configurations (mode tokens are part of the CLI/config surface):

* ``smp_timestamps``   -- only segments at the annotated comparison
  timestamps (snapped to downbeats);
* ``smp_all_segments`` -- every downbeat segment of the comparison works;
* ``full_indices``     -- the above plus every segment of a distractor
  corpus.

Music level: one index over the whole corpus, each work with at least one
ground-truth partner queries it (self excluded), and rankings are scored
with mean average precision and mean rank of the first correct result.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .corpus import AnnotationRow, MusicWork
from .errors import ValidationError
from .index import RetrievalHit, SegmentIndex, query_topk
from .segmenter import GridParams, Segment, segment_at, snap_to_segment_start
from .similarity import DEFAULT_WEIGHTS, SimilarityWeights
from .verdict import rank_musics

logger = logging.getLogger(__name__)

MODE_TIMESTAMPS = "smp_timestamps"
MODE_ALL_SEGMENTS = "smp_all_segments"
MODE_FULL = "full_indices"
MODES = (MODE_TIMESTAMPS, MODE_ALL_SEGMENTS, MODE_FULL)


@dataclass(frozen=True)
class EvalConfig:
    mode: str = MODE_TIMESTAMPS
    k_values: tuple[int, ...] = (1, 5, 10)
    temporal_tolerance_sec: float = 1.0
    folds: int = 5
    fold_seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"unknown eval mode {self.mode!r} (choose from {MODES})")
        if not self.k_values or any(b <= a for a, b in zip(self.k_values, self.k_values[1:])):
            raise ValidationError(f"k_values must be non-empty ascending (got {self.k_values})")
        if any(k < 1 for k in self.k_values):
            raise ValidationError("k_values must be >= 1")
        if self.temporal_tolerance_sec <= 0:
            raise ValidationError("temporal_tolerance_sec must be > 0")
        if self.folds < 1:
            raise ValidationError("folds must be >= 1")


class SegmentTruth(NamedTuple):
    """Ground truth for one query timestamp."""

    music_id: str
    time_sec: float
    acoustic_index: int


@dataclass(frozen=True)
class SegmentQueryRecord:
    """Outcome of one annotated-timestamp query."""

    fold: int
    pair_id: int
    acoustic_index: int
    original_id: str
    comparison_id: str
    original_time_sec: float
    comparison_time_sec: float
    snapped_start_sec: float
    snap_distance_sec: float
    correct_rank: int | None
    matched_offset_sec: float | None


@dataclass
class SegmentEvalResult:
    recall_at: dict[int, float]
    query_count: int
    records: list[SegmentQueryRecord] = field(default_factory=list)


@dataclass(frozen=True)
class MusicQueryRecord:
    query_music_id: str
    average_precision: float
    first_correct_rank: int


@dataclass
class MusicEvalResult:
    map: float
    mr1: float
    library_size: int
    records: list[MusicQueryRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# metric primitives


def recall_1s_at_k(
    hits: Sequence[RetrievalHit],
    truth: SegmentTruth,
    k: int,
    tolerance_sec: float = 1.0,
) -> bool:
    """True iff a top-k hit is on the correct work with its segment start
    within `tolerance_sec` of the annotated comparison time."""
    return any(
        hit.rank <= k
        and hit.music_id == truth.music_id
        and abs(hit.start_sec - truth.time_sec) <= tolerance_sec
        for hit in hits
    )


def average_precision(ranked: Sequence[str], correct: set[str]) -> float:
    """AP of a deduplicated ranking against the retrievable correct set.

    Callers pass `correct` already intersected with the library; items of
    `correct` missing from `ranked` count in the denominator, and 0.0 is
    returned when no correct item appears at all.
    """
    if not correct:
        raise ValueError("correct set must be non-empty")
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list must be deduplicated")
    hits = 0
    precision_sum = 0.0
    for i, music_id in enumerate(ranked, 1):
        if music_id in correct:
            hits += 1
            precision_sum += hits / i
    if hits == 0:
        return 0.0
    return precision_sum / len(correct)


def mean_rank_first_correct(
    ranked_lists: Sequence[Sequence[str]],
    correct_sets: Sequence[set[str]],
    library_size: int,
) -> float:
    """Mean over queries of the first correct rank; a query whose correct
    works never appear contributes library_size + 1."""
    if len(ranked_lists) != len(correct_sets):
        raise ValueError("ranked_lists and correct_sets must align")
    if not ranked_lists:
        raise ValueError("at least one query required")
    total = 0.0
    for ranked, correct in zip(ranked_lists, correct_sets):
        rank = next((i for i, m in enumerate(ranked, 1) if m in correct), library_size + 1)
        total += rank
    return total / len(ranked_lists)


# ---------------------------------------------------------------------------
# fold splitting


def fold_split(pair_ids: Sequence[int], folds: int, seed: int) -> list[list[int]]:
    """Partition pair ids into `folds` groups with a seeded shuffle;
    deterministic and reproducible."""
    ids = sorted(set(pair_ids))
    rng = random.Random(f"{seed}/folds")
    rng.shuffle(ids)
    return [ids[f::folds] for f in range(folds)]


# ---------------------------------------------------------------------------
# segment-level protocol


def _works_map(works: Sequence[MusicWork]) -> dict[str, MusicWork]:
    return {w.music_id: w for w in works}


def _resolve(works_map: dict[str, MusicWork], music_id: str, context: str) -> MusicWork:
    work = works_map.get(music_id)
    if work is None:
        raise ValidationError(f"{context}: unknown music id {music_id!r}")
    return work


def _timestamp_segments(
    rows: Sequence[AnnotationRow],
    works_map: dict[str, MusicWork],
    works_order: dict[str, int],
    grid: GridParams,
) -> list[Segment]:
    """Library segments for timestamps mode: one segment per distinct
    snapped comparison timestamp, grouped by work in corpus order."""
    starts: dict[str, set[float]] = {}
    for row in rows:
        work = _resolve(works_map, row.comparison_id, f"pair {row.pair_id}")
        for t in row.comparison_times_sec:
            start, _ = snap_to_segment_start(work, t, grid.bar_count)
            starts.setdefault(work.music_id, set()).add(start)
    segments = []
    for music_id in sorted(starts, key=lambda m: works_order[m]):
        work = works_map[music_id]
        for start in sorted(starts[music_id]):
            segments.append(segment_at(work, start, grid))
    return segments


def run_segment_eval(
    works: Sequence[MusicWork],
    annotations: Sequence[AnnotationRow],
    config: EvalConfig,
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    grid: GridParams | None = None,
    distractors: Sequence[MusicWork] = (),
) -> SegmentEvalResult:
    """Run the fold-based segment retrieval protocol for one mode.

    Recall is averaged over all queries pooled across folds. Query
    features are rasterized at the downbeat nearest the annotated original
    time; the tolerance check uses the raw annotated comparison second.
    """
    config.validate()
    if not annotations:
        raise ValidationError("segment evaluation requires at least one annotation row")
    grid = grid or GridParams()
    works_map = _works_map(works)
    works_order = {w.music_id: i for i, w in enumerate(works)}
    for row in annotations:
        _resolve(works_map, row.original_id, f"pair {row.pair_id}")
        _resolve(works_map, row.comparison_id, f"pair {row.pair_id}")

    distractor_segments: list[Segment] = []
    if config.mode == MODE_FULL:
        from .segmenter import enumerate_downbeat_segments

        for work in distractors:
            distractor_segments.extend(enumerate_downbeat_segments(work, grid))
        if not distractors:
            logger.warning("full_indices mode without distractors degrades to all-segments")

    folds = fold_split([r.pair_id for r in annotations], config.folds, config.fold_seed)
    max_k = max(config.k_values)
    records: list[SegmentQueryRecord] = []

    for fold_no, fold_pairs in enumerate(folds):
        fold_pair_set = set(fold_pairs)
        rows = [r for r in annotations if r.pair_id in fold_pair_set]
        if not rows:
            continue

        if config.mode == MODE_TIMESTAMPS:
            library = _timestamp_segments(rows, works_map, works_order, grid)
        else:
            from .segmenter import enumerate_downbeat_segments

            comp_ids: list[str] = []
            for row in rows:
                if row.comparison_id not in comp_ids:
                    comp_ids.append(row.comparison_id)
            comp_ids.sort(key=lambda m: works_order[m])
            library = []
            for music_id in comp_ids:
                library.extend(enumerate_downbeat_segments(works_map[music_id], grid))
            library = library + distractor_segments

        index = SegmentIndex.from_segments(library, weights, grid)
        for row in rows:
            query_work = works_map[row.original_id]
            for t_orig, t_comp in zip(row.original_times_sec, row.comparison_times_sec):
                start, snap_dist = snap_to_segment_start(query_work, t_orig, grid.bar_count)
                query = segment_at(query_work, start, grid)
                hits = query_topk(index, query, max_k, {query_work.music_id})
                truth = SegmentTruth(row.comparison_id, t_comp, row.acoustic_index)
                correct = [
                    h
                    for h in hits
                    if h.music_id == truth.music_id
                    and abs(h.start_sec - truth.time_sec) <= config.temporal_tolerance_sec
                ]
                best = min(correct, key=lambda h: h.rank) if correct else None
                records.append(
                    SegmentQueryRecord(
                        fold=fold_no,
                        pair_id=row.pair_id,
                        acoustic_index=row.acoustic_index,
                        original_id=row.original_id,
                        comparison_id=row.comparison_id,
                        original_time_sec=t_orig,
                        comparison_time_sec=t_comp,
                        snapped_start_sec=start,
                        snap_distance_sec=snap_dist,
                        correct_rank=None if best is None else best.rank,
                        matched_offset_sec=(
                            None if best is None else abs(best.start_sec - truth.time_sec)
                        ),
                    )
                )

    recall_at = {
        k: sum(1 for r in records if r.correct_rank is not None and r.correct_rank <= k)
        / len(records)
        for k in config.k_values
    }
    return SegmentEvalResult(recall_at=recall_at, query_count=len(records), records=records)


# ---------------------------------------------------------------------------
# music-level protocol


def partner_sets(
    works: Sequence[MusicWork], annotations: Sequence[AnnotationRow] | None
) -> dict[str, set[str]]:
    """Ground-truth partners per work: symmetric annotation pairing when
    rows are given, else cover-group (group_id) equality."""
    partners: dict[str, set[str]] = {w.music_id: set() for w in works}
    if annotations:
        for row in annotations:
            if row.original_id in partners and row.comparison_id in partners:
                if row.original_id != row.comparison_id:
                    partners[row.original_id].add(row.comparison_id)
                    partners[row.comparison_id].add(row.original_id)
        return partners
    groups: dict[str, list[str]] = {}
    for work in works:
        if work.group_id is not None:
            groups.setdefault(work.group_id, []).append(work.music_id)
    for members in groups.values():
        for m in members:
            partners[m].update(x for x in members if x != m)
    return partners


def run_music_eval(
    works: Sequence[MusicWork],
    annotations: Sequence[AnnotationRow] | None = None,
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    grid: GridParams | None = None,
) -> MusicEvalResult:
    """Rank the whole library from each paired work and score mAP / MR1.

    Works without any ground-truth partner are skipped with a warning. The
    MR1 fallback for a never-retrieved partner is library_size + 1, where
    library_size counts distinct musics in the index.
    """
    grid = grid or GridParams()
    from .index import build_index

    index = build_index(works, weights, grid)
    library_size = len(index.music_ids)
    partners = partner_sets(works, annotations)

    queries = [w for w in works if partners.get(w.music_id)]
    skipped = [w.music_id for w in works if not partners.get(w.music_id)]
    if skipped:
        logger.warning("skipping %d works without ground-truth partners", len(skipped))
    if not queries:
        raise ValidationError("no work has a ground-truth partner; nothing to evaluate")

    records: list[MusicQueryRecord] = []
    ranked_lists: list[list[str]] = []
    correct_sets: list[set[str]] = []
    for work in queries:
        ranking = rank_musics(work, index)
        ranked_ids = ranking.music_ids()
        correct = {p for p in partners[work.music_id] if p in index.by_music}
        ap = average_precision(ranked_ids, correct)
        first = next(
            (i for i, m in enumerate(ranked_ids, 1) if m in correct), library_size + 1
        )
        records.append(
            MusicQueryRecord(
                query_music_id=work.music_id, average_precision=ap, first_correct_rank=first
            )
        )
        ranked_lists.append(ranked_ids)
        correct_sets.append(correct)

    map_value = sum(r.average_precision for r in records) / len(records)
    mr1 = mean_rank_first_correct(ranked_lists, correct_sets, library_size)
    return MusicEvalResult(
        map=map_value, mr1=mr1, library_size=library_size, records=records
    )


# ---------------------------------------------------------------------------
# report tables


def format_segment_table(
    results: dict[str, SegmentEvalResult], tolerance_sec: float
) -> str:
    """Aligned text table: one row per mode, one recall column per k."""
    k_values = sorted({k for res in results.values() for k in res.recall_at})
    headers = ["mode"] + [f"Rec.{tolerance_sec:g}s@{k}" for k in k_values] + ["queries"]
    rows = [headers]
    for mode, res in results.items():
        rows.append(
            [mode]
            + [f"{res.recall_at.get(k, float('nan')):.3f}" for k in k_values]
            + [str(res.query_count)]
        )
    widths = [max(len(r[c]) for r in rows) for c in range(len(headers))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip())
    return "\n".join(lines)


def format_music_table(result: MusicEvalResult) -> str:
    rows = [
        ["method", "mAP", "MR1", "queries"],
        [
            "music-domain similarity",
            f"{result.map:.3f}",
            f"{result.mr1:.2f}",
            str(len(result.records)),
        ],
    ]
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip() for r in rows
    )
