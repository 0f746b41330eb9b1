"""Institutional data distributions: Poisson modeling, skewed synthetic
cohorts, and partition-file ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateModelError, ParseError, ValidationError
from .params import DataShard, blob_geometry, make_blob_shard

_COUNT_SALT = 7011
_SHARD_SALT = 7012

PARTITION_HEADER = ("Subject_ID", "Partition_ID")


@dataclass(frozen=True)
class InstitutionEntry:
    count: int
    sample_ids: tuple[str, ...]


@dataclass(frozen=True)
class PartitionTable:
    """Sample holdings per institution; sample ids are globally unique."""

    entries: dict[str, InstitutionEntry]
    total: int

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("a cohort needs at least one institution")
        seen: set[str] = set()
        total = 0
        for inst, entry in self.entries.items():
            if entry.count != len(entry.sample_ids):
                raise ValidationError(f"count mismatch for institution {inst!r}")
            if entry.count < 0:
                raise ValidationError("counts must be non-negative")
            for sid in entry.sample_ids:
                if sid in seen:
                    raise ValidationError(f"duplicate sample id {sid!r}")
                seen.add(sid)
            total += entry.count
        if total != self.total:
            raise ValidationError(f"total {self.total} != sum of counts {total}")

    @staticmethod
    def from_sample_ids(mapping: Mapping[str, Sequence[str]]) -> PartitionTable:
        """Build a table from institution -> sample-id lists.

        Sample order is normalized to sorted, which makes the CSV writer's
        output a lossless round trip.
        """
        entries = {
            inst: InstitutionEntry(len(ids), tuple(sorted(ids)))
            for inst, ids in mapping.items()
        }
        return PartitionTable(entries, sum(e.count for e in entries.values()))

    def counts(self) -> dict[str, int]:
        return {inst: entry.count for inst, entry in self.entries.items()}

    def institutions(self) -> tuple[str, ...]:
        return tuple(self.entries)


@dataclass(frozen=True)
class PoissonModel:
    """Fitted mean sample count per institution."""

    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError("lam must be a positive finite real")


def poisson_pmf(x: int, lam: float) -> float:
    """P[X = x] for X ~ Poisson(lam), evaluated in log space."""
    if not (np.isfinite(lam) and lam > 0):
        raise ValidationError("lam must be a positive finite real")
    if x != int(x) or x < 0:
        raise ValidationError("x must be a non-negative integer")
    x = int(x)
    return math.exp(x * math.log(lam) - lam - math.lgamma(x + 1))


def fit_poisson(table: PartitionTable) -> PoissonModel:
    """Maximum-likelihood fit: lam is the mean institution count."""
    counts = list(table.counts().values())
    mean = sum(counts) / len(counts)
    if mean <= 0:
        raise DegenerateModelError("every institution has zero samples")
    return PoissonModel(mean)


def _synthesize_entries(
    sized_ids: Sequence[tuple[str, int]],
    seed: int,
    n_classes: int,
    feature_dim: int,
) -> tuple[PartitionTable, dict[str, DataShard]]:
    geometry = blob_geometry(n_classes, feature_dim, seed)
    mapping: dict[str, list[str]] = {}
    shards: dict[str, DataShard] = {}
    for idx, (inst, count) in enumerate(sized_ids):
        sample_ids = [f"{inst}-s{k:05d}" for k in range(count)]
        mapping[inst] = sample_ids
        rng = np.random.default_rng([seed, _SHARD_SALT, idx])
        shards[inst] = make_blob_shard(sample_ids, geometry, rng)
    return PartitionTable.from_sample_ids(mapping), shards


def generate_synthetic_cohort(
    n_institutions: int,
    lam: float,
    n_outliers: int,
    outlier_scale: float,
    seed: int,
    n_classes: int = 4,
    feature_dim: int = 8,
) -> tuple[PartitionTable, dict[str, DataShard]]:
    """Draw a skewed cohort: Poisson(lam) counts plus a few large outliers.

    Counts drawn as zero are clamped to 1 so every institution can
    participate. Deterministic under `seed`.
    """
    if n_institutions < 1:
        raise ValidationError("need at least one institution")
    if not 0 <= n_outliers < n_institutions:
        raise ValidationError("n_outliers must be in [0, n_institutions)")
    if not lam > 0:
        raise ValidationError("lam must be positive")
    if outlier_scale < 1:
        raise ValidationError("outlier_scale must be >= 1")
    rng = np.random.default_rng([seed, _COUNT_SALT])
    regular = rng.poisson(lam, size=n_institutions - n_outliers)
    outliers = rng.poisson(lam * outlier_scale, size=n_outliers)
    counts = np.maximum(np.concatenate([regular, outliers]), 1).astype(int)
    sized = [(f"inst{i:03d}", int(c)) for i, c in enumerate(counts)]
    return _synthesize_entries(sized, seed, n_classes, feature_dim)


def synthesize_shards(
    table: PartitionTable,
    seed: int,
    n_classes: int = 4,
    feature_dim: int = 8,
) -> dict[str, DataShard]:
    """Synthesize features for an ingested table; only ids and counts are real."""
    geometry = blob_geometry(n_classes, feature_dim, seed)
    shards: dict[str, DataShard] = {}
    for idx, (inst, entry) in enumerate(table.entries.items()):
        rng = np.random.default_rng([seed, _SHARD_SALT, idx])
        shards[inst] = make_blob_shard(entry.sample_ids, geometry, rng)
    return shards


def load_partition_csv(path) -> PartitionTable:
    """Parse `Subject_ID,Partition_ID` rows grouped by partition id."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PARTITION_HEADER:
            raise ParseError(f"expected header {','.join(PARTITION_HEADER)}", line=1)
        groups: dict[str, list[str]] = {}
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 columns, got {len(row)}", line=lineno)
            subject, partition = row[0].strip(), row[1].strip()
            if not subject:
                raise ParseError("missing subject id", line=lineno)
            if not partition:
                raise ParseError("missing partition id", line=lineno)
            if subject in seen:
                raise ParseError(f"duplicate subject id {subject!r}", line=lineno)
            seen.add(subject)
            groups.setdefault(partition, []).append(subject)
    if not groups:
        raise ParseError("no data rows")
    return PartitionTable.from_sample_ids(groups)
