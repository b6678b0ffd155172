"""Music-level verdicts: weighted majority voting over segment hits.

Every downbeat segment of the query work retrieves its top-20 matches; a
hit at rank r contributes weight 21 - r to its work's total. Candidates
are ranked by total weight (zero-vote works are omitted), with the best
single segment pair kept per candidate for localization and a dominant
facet label for explanation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import MusicWork
from .errors import ValidationError
from .index import RetrievalHit, SegmentIndex, batch_query
from .similarity import FacetScores, attribute_dominant_facet, combined_similarity
from .segmenter import Segment, enumerate_downbeat_segments

VOTE_TOP_RANK = 20


def vote_weight(rank: int) -> float:
    """Vote weight for a hit at the given rank: 21 - rank, defined for
    ranks 1..20 (20 down to 1, linear)."""
    if not 1 <= rank <= VOTE_TOP_RANK:
        raise ValueError(f"rank must be in 1..{VOTE_TOP_RANK} (got {rank})")
    return float(VOTE_TOP_RANK + 1 - rank)


def aggregate_votes(hit_lists: list[list[RetrievalHit]]) -> dict[str, float]:
    """Total vote weight per music over all hit lists (each list holds at
    most 20 ranked hits)."""
    totals: dict[str, float] = {}
    for hits in hit_lists:
        for hit in hits:
            totals[hit.music_id] = totals.get(hit.music_id, 0.0) + vote_weight(hit.rank)
    return totals


@dataclass(frozen=True)
class MatchPair:
    """The best-scoring segment pair for one candidate music."""

    query_start_sec: float
    hit_start_sec: float
    score: float
    dominant_facet: str


@dataclass(frozen=True)
class RankedMusic:
    music_id: str
    total_weight: float
    best_pair: MatchPair


@dataclass(frozen=True)
class MusicRanking:
    """Candidate musics ordered by total vote weight."""

    query_music_id: str
    ranked: tuple[RankedMusic, ...]

    def music_ids(self) -> list[str]:
        return [r.music_id for r in self.ranked]


@dataclass(frozen=True)
class MatchReport:
    """One localized segment match with spans, scores and explanation."""

    query_music_id: str
    query_start_sec: float
    query_end_sec: float
    music_id: str
    start_sec: float
    end_sec: float
    score: float
    facets: FacetScores
    dominant_facet: str


def rank_musics(
    query: MusicWork,
    index: SegmentIndex,
    k: int = VOTE_TOP_RANK,
    exclude_self: bool = True,
) -> MusicRanking:
    """Rank library musics by weighted majority voting.

    All downbeat segments of the query vote; hits past rank 20 never carry
    weight even if retrieval goes deeper. Ties break by best single
    segment score descending, then music_id ascending. The query's own
    work is excluded from hits unless exclude_self is False.
    """
    segments = enumerate_downbeat_segments(query, index.grid)
    if not segments:
        raise ValidationError(f"query work {query.music_id!r} has zero segments")
    exclude = {query.music_id} if exclude_self else set()
    hit_lists = batch_query(index, segments, k, exclude)
    voting_lists = [hits[:VOTE_TOP_RANK] for hits in hit_lists]
    totals = aggregate_votes(voting_lists)

    best_hits: dict[str, tuple[RetrievalHit, Segment]] = {}
    for segment, hits in zip(segments, hit_lists):
        for hit in hits:
            key = (-hit.score, segment.start_sec, hit.start_sec)
            cur = best_hits.get(hit.music_id)
            if cur is None or key < (-cur[0].score, cur[1].start_sec, cur[0].start_sec):
                best_hits[hit.music_id] = (hit, segment)

    ranked = []
    order = sorted(
        totals.items(), key=lambda kv: (-kv[1], -best_hits[kv[0]][0].score, kv[0])
    )
    for music_id, weight in order:
        hit, segment = best_hits[music_id]
        facet = attribute_dominant_facet(
            hit.facets, index.weights, segment, index.entry(hit.entry_id)
        )
        ranked.append(
            RankedMusic(
                music_id=music_id,
                total_weight=weight,
                best_pair=MatchPair(
                    query_start_sec=segment.start_sec,
                    hit_start_sec=hit.start_sec,
                    score=hit.score,
                    dominant_facet=facet,
                ),
            )
        )
    return MusicRanking(query_music_id=query.music_id, ranked=tuple(ranked))


def report_matches(
    query: MusicWork,
    index: SegmentIndex,
    top_n_musics: int = 3,
    threshold: float = 0.6,
    ranking: MusicRanking | None = None,
) -> list[MatchReport]:
    """Every segment pair above `threshold` against the top-n candidates.

    Pairs are scored exhaustively within each candidate (not limited to
    retrieval depth), so nothing above the threshold is missed. Reports
    are ordered by candidate rank, then score descending, then spans.
    """
    if ranking is None:
        ranking = rank_musics(query, index)
    segments = enumerate_downbeat_segments(query, index.grid)
    reports: list[MatchReport] = []
    for ranked in ranking.ranked[:top_n_musics]:
        found = []
        candidates = [index.entry(i) for i in index.by_music[ranked.music_id]]
        for segment in segments:
            for entry in candidates:
                score, facets = combined_similarity(segment, entry, index.weights)
                if score >= threshold:
                    facet = attribute_dominant_facet(facets, index.weights, segment, entry)
                    found.append(
                        MatchReport(
                            query_music_id=query.music_id,
                            query_start_sec=segment.start_sec,
                            query_end_sec=segment.end_sec,
                            music_id=entry.music_id,
                            start_sec=entry.start_sec,
                            end_sec=entry.end_sec,
                            score=score,
                            facets=facets,
                            dominant_facet=facet,
                        )
                    )
        found.sort(key=lambda r: (-r.score, r.query_start_sec, r.start_sec))
        reports.extend(found)
    return reports
