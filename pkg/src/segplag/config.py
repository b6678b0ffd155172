"""Run configuration: defaults, config-file parsing, flag overrides.

The config file is plain ``key = value`` text (``#`` comments allowed);
flags always win over file values. The resolved configuration has a
canonical digest that output files carry in their provenance header.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import FormatError, ValidationError
from .evaluation import MODES
from .segmenter import GridParams
from .similarity import DEFAULT_WEIGHTS, SimilarityWeights


@dataclass(frozen=True)
class RunConfig:
    weights: SimilarityWeights = DEFAULT_WEIGHTS
    grid: GridParams = GridParams()
    k: int = 20
    threshold: float = 0.6
    top_n: int = 3
    tolerance_sec: float = 1.0
    modes: tuple[str, ...] = ("smp_timestamps",)
    k_values: tuple[int, ...] = (1, 5, 10)
    folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        self.weights.normalized()
        if self.k < 1:
            raise ValidationError(f"k must be >= 1 (got {self.k})")
        if not 0 <= self.threshold <= 1:
            raise ValidationError(f"threshold must be in [0, 1] (got {self.threshold})")
        if self.top_n < 1:
            raise ValidationError(f"top_n must be >= 1 (got {self.top_n})")
        if self.tolerance_sec <= 0:
            raise ValidationError(f"tolerance must be > 0 (got {self.tolerance_sec})")
        for mode in self.modes:
            if mode not in MODES:
                raise ValidationError(f"unknown eval mode {mode!r} (choose from {MODES})")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ValidationError(f"k_values must be positive (got {self.k_values})")
        if self.folds < 1:
            raise ValidationError(f"folds must be >= 1 (got {self.folds})")

    def digest(self) -> str:
        """SHA-256 over the canonical key=value rendering."""
        lines = [
            f"bar_count={self.grid.bar_count}",
            f"beats_per_bar={self.grid.beats_per_bar}",
            f"cells_per_beat={self.grid.cells_per_beat}",
            f"folds={self.folds}",
            f"k={self.k}",
            f"k_values={','.join(map(str, self.k_values))}",
            f"modes={','.join(self.modes)}",
            f"seed={self.seed}",
            f"threshold={self.threshold!r}",
            f"tolerance={self.tolerance_sec!r}",
            f"top_n={self.top_n}",
            f"weights={self.weights.w_pianoroll!r},{self.weights.w_onset!r},{self.weights.w_chord!r}",
        ]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; unknown keys are rejected later when
    applied."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}: line {lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _floats(value, n: int, what: str) -> tuple[float, ...]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    else:
        parts = list(value)
    try:
        out = tuple(float(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{what}: expected {n} comma-separated numbers") from exc
    if len(out) != n:
        raise ValidationError(f"{what}: expected {n} values, got {len(out)}")
    return out


def _ints(value, what: str) -> tuple[int, ...]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    else:
        parts = list(value)
    try:
        return tuple(int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{what}: expected comma-separated integers") from exc


def _strs(value) -> tuple[str, ...]:
    if isinstance(value, str):
        return tuple(p.strip() for p in value.split(",") if p.strip())
    return tuple(str(p) for p in value)


_KNOWN_KEYS = {
    "weights", "cells_per_beat", "beats_per_bar", "bar_count", "k", "threshold",
    "top_n", "tolerance", "modes", "mode", "k_values", "folds", "seed",
}


def build_run_config(*sources: dict | None) -> RunConfig:
    """Fold override mappings (later wins) onto the defaults.

    Values may be strings (config file, CLI) or typed (service requests);
    unknown keys raise.
    """
    merged: dict[str, object] = {}
    for source in sources:
        if source:
            merged.update({k: v for k, v in source.items() if v is not None})
    unknown = set(merged) - _KNOWN_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")

    config = RunConfig()
    if "weights" in merged:
        wp, wo, wc = _floats(merged["weights"], 3, "weights")
        config = replace(config, weights=SimilarityWeights(wp, wo, wc))
    grid_kwargs = {}
    for key in ("cells_per_beat", "beats_per_bar", "bar_count"):
        if key in merged:
            grid_kwargs[key] = int(merged[key])  # type: ignore[arg-type]
    if grid_kwargs:
        config = replace(config, grid=replace(config.grid, **grid_kwargs))
    if "k" in merged:
        config = replace(config, k=int(merged["k"]))  # type: ignore[arg-type]
    if "threshold" in merged:
        config = replace(config, threshold=float(merged["threshold"]))  # type: ignore[arg-type]
    if "top_n" in merged:
        config = replace(config, top_n=int(merged["top_n"]))  # type: ignore[arg-type]
    if "tolerance" in merged:
        config = replace(config, tolerance_sec=float(merged["tolerance"]))  # type: ignore[arg-type]
    mode_value = merged.get("modes", merged.get("mode"))
    if mode_value is not None:
        config = replace(config, modes=_strs(mode_value))
    if "k_values" in merged:
        config = replace(config, k_values=tuple(sorted(_ints(merged["k_values"], "k_values"))))
    if "folds" in merged:
        config = replace(config, folds=int(merged["folds"]))  # type: ignore[arg-type]
    if "seed" in merged:
        config = replace(config, seed=int(merged["seed"]))  # type: ignore[arg-type]
    config.validate()
    return config
