"""Feature-similarity tooling: rank a corpus by impression distance to a
seed code and select the nearest samples as a training subset.

The seed code ensembles all labeled exemplars into one code; every corpus
item is then encoded individually, its distance to the seed measured, and
the corpus sorted ascending. Items of mismatched geometry are bilinearly
resized to the template geometry before encoding. Unreadable items are
skipped with a recorded reason rather than failing the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .codes import CodeSchema, ImpressionCode, distance, encode, encode_ensemble
from .datasets import ManifestEntry
from .errors import ConfigError, DataError
from .images import fit_to_geometry, load_image
from .network import NetworkCheckpoint

CorpusItem = Union[ManifestEntry, tuple[str, np.ndarray]]


@dataclass
class RankedCorpus:
    """Corpus items ordered by ascending distance to the seed code."""

    entries: list[tuple[str, float]]
    seed_fingerprint: str
    schema: CodeSchema
    cutoff: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        ids = [item_id for item_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("ranked corpus contains duplicate item ids")
        dists = [d for _, d in self.entries]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise DataError("ranked corpus distances are not non-decreasing")

    def __len__(self) -> int:
        return len(self.entries)


def build_seed_code(
    net: NetworkCheckpoint,
    images: np.ndarray | Iterable[np.ndarray],
    schema: CodeSchema = CodeSchema.MEAN_VAR,
) -> ImpressionCode:
    """Ensemble the labeled exemplars into one seed code."""
    return encode_ensemble(net, images, schema)


def _item_image(item: CorpusItem) -> tuple[str, np.ndarray]:
    if isinstance(item, ManifestEntry):
        return item.item_id, load_image(item.path)
    item_id, array = item
    return str(item_id), np.asarray(array)


def rank_by_distance(
    net: NetworkCheckpoint,
    seed: ImpressionCode,
    corpus: Iterable[CorpusItem],
    schema: CodeSchema | None = None,
) -> RankedCorpus:
    """Encode each corpus item and order by distance to the seed code.

    Streaming: holds only the (id, distance) list. Ties order by id, so
    the ranking is invariant to corpus input order.
    """
    schema = schema or seed.schema
    if schema != seed.schema:
        raise ConfigError(f"requested schema {schema.value!r} differs from seed schema {seed.schema.value!r}")
    geometry = (net.spec.input_channels, net.spec.input_height, net.spec.input_width)
    scored: list[tuple[str, float]] = []
    skipped: list[tuple[str, str]] = []
    for item in corpus:
        try:
            item_id, array = _item_image(item)
            if array.ndim != 3:
                raise DataError(f"corpus item {item_id!r} is not a single C,H,W image")
            if array.shape != geometry:
                array = fit_to_geometry(array, geometry)
            code = encode(net, array[None].astype(np.float32), schema)
            scored.append((item_id, distance(code, seed)))
        except DataError as exc:
            ident = item.item_id if isinstance(item, ManifestEntry) else str(item[0])
            skipped.append((ident, str(exc)))
    scored.sort(key=lambda pair: (pair[1], pair[0]))
    return RankedCorpus(
        entries=scored,
        seed_fingerprint=seed.fingerprint,
        schema=schema,
        skipped=skipped,
    )


def select_top(ranked: RankedCorpus, n_t: int) -> list[str]:
    """Ids of the ``n_t`` nearest corpus items."""
    if n_t < 0 or n_t > len(ranked.entries):
        raise ConfigError(f"n_t must lie in [0, {len(ranked.entries)}], got {n_t}")
    return [item_id for item_id, _ in ranked.entries[:n_t]]


def precision_at_k(
    ranked: RankedCorpus,
    labels: dict[str, str],
    k: int,
    positive_class: str,
) -> float:
    """Fraction of the top-k items whose label equals ``positive_class``."""
    if k < 1 or k > len(ranked.entries):
        raise ConfigError(f"k must lie in [1, {len(ranked.entries)}], got {k}")
    top = ranked.entries[:k]
    try:
        hits = sum(1 for item_id, _ in top if labels[item_id] == positive_class)
    except KeyError as exc:
        raise DataError(f"no ground-truth label for ranked item {exc}") from exc
    return hits / k


def write_ranking_csv(ranked: RankedCorpus, path) -> None:
    """CSV with columns id,distance,rank (rank is 1-based)."""
    lines = ["id,distance,rank"]
    for rank, (item_id, dist) in enumerate(ranked.entries, start=1):
        lines.append(f"{item_id},{dist!r},{rank}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
