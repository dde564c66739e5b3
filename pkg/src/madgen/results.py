"""Ranked generation results shared between the generator and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass


@dataclass(frozen=True)
class GeneratedCandidate:
    smiles: str
    frequency: int
    mean_log_likelihood: float


@dataclass(frozen=True)
class RankedMolecules:
    """Deduplicated candidates for one query, best first.

    Sorted by sample frequency, ties by mean trajectory log-likelihood, then
    canonical SMILES. ``valid_fraction`` is the share of sampled trajectories
    that produced a valence-valid molecule.
    """

    query_id: str
    entries: tuple[GeneratedCandidate, ...]
    valid_fraction: float

    def to_jsonl(self) -> str:
        lines = []
        for rank, entry in enumerate(self.entries, start=1):
            lines.append(json.dumps({
                "query_id": self.query_id,
                "rank": rank,
                "smiles": entry.smiles,
                "frequency": entry.frequency,
                "mean_log_likelihood": entry.mean_log_likelihood,
                "valid_fraction_of_batch": self.valid_fraction,
            }, sort_keys=True))
        return "\n".join(lines)
