"""
data.py — Sparse rating data: parsing, adjacency views, splitting, serialization.

An HdiDataset holds the observed entries R_K of a high-dimensional incomplete
rating matrix as three parallel numpy arrays plus three CSR adjacency views:

  by_user       → R_Ku, item neighbours of each user (sorted by item index)
  by_item       → R_Ki, user neighbours of each item (sorted by user index)
  entity_graph  → both of the above stacked in FactorState row order: user u is
                  row u, item i is row |U|+i, and neighbour indices point at
                  factor rows. Every blockwise kernel runs on this view.

Datasets are immutable after construction (arrays are flagged read-only), so
any number of worker threads can read them concurrently.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from minihes.errors import ConfigError, DatasetParseError

logger = logging.getLogger(__name__)

Source = Union[bytes, str, IO[bytes], IO[str]]

DELIMITERS = {
    "comma": ",",
    "tab": "\t",
    "whitespace": None,
    "::": "::",
}


# ── Domain types ──────────────────────────────────────────────────────────────

class RatingTriple(NamedTuple):
    user_id: int
    item_id: int
    rating: float


@dataclass(frozen=True, eq=False)
class Adjacency:
    """CSR adjacency: row k owns indices[indptr[k]:indptr[k+1]]."""

    indptr: np.ndarray
    indices: np.ndarray
    ratings: np.ndarray

    @property
    def num_rows(self) -> int:
        return len(self.indptr) - 1

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[row], self.indptr[row + 1]
        return self.indices[lo:hi], self.ratings[lo:hi]

    def as_lists(self) -> list[list[tuple[int, float]]]:
        return [
            [(int(j), float(r)) for j, r in zip(*self.neighbors(k))]
            for k in range(self.num_rows)
        ]


def _build_csr(
    rows: np.ndarray, cols: np.ndarray, ratings: np.ndarray, num_rows: int, num_cols: int
) -> Adjacency:
    matrix = sp.csr_matrix((ratings, (rows, cols)), shape=(num_rows, num_cols), dtype=np.float64)
    # coo -> csr sums repeated cells; stored zeros are kept
    if matrix.nnz != len(ratings):
        raise ValueError("duplicate (user, item) pairs in rating entries")
    matrix.sort_indices()
    return Adjacency(
        indptr=_frozen(matrix.indptr.astype(np.int64)),
        indices=_frozen(matrix.indices.astype(np.int64)),
        ratings=_frozen(matrix.data),
    )


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class HdiDataset:
    """Observed entries of an HDI rating matrix over a fixed entity universe."""

    def __init__(
        self,
        users: np.ndarray,
        items: np.ndarray,
        ratings: np.ndarray,
        num_users: int,
        num_items: int,
        user_ids: Optional[Sequence[str]] = None,
        item_ids: Optional[Sequence[str]] = None,
    ):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if not (len(users) == len(items) == len(ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if num_users < 0 or num_items < 0:
            raise ValueError("entity counts must be non-negative")
        if len(users) and (users.min() < 0 or users.max() >= num_users):
            raise ValueError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= num_items):
            raise ValueError("item index out of range")
        if not np.all(np.isfinite(ratings)):
            raise ValueError("ratings must be finite")

        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.users = _frozen(users)
        self.items = _frozen(items)
        self.ratings = _frozen(ratings)
        self.user_ids: tuple[str, ...] = tuple(
            user_ids if user_ids is not None else (str(u) for u in range(num_users))
        )
        self.item_ids: tuple[str, ...] = tuple(
            item_ids if item_ids is not None else (str(i) for i in range(num_items))
        )
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise ValueError("id maps must cover the entity universe")

    # ── Sizes ─────────────────────────────────────────────────────────────────

    def __len__(self) -> int:
        return len(self.ratings)

    def __repr__(self) -> str:
        return (
            f"HdiDataset(num_users={self.num_users}, num_items={self.num_items}, "
            f"entries={len(self)}, density={self.density:.4%})"
        )

    @property
    def num_entities(self) -> int:
        return self.num_users + self.num_items

    @property
    def density(self) -> float:
        cells = self.num_users * self.num_items
        return len(self) / cells if cells else 0.0

    # ── Entries & ID maps ─────────────────────────────────────────────────────

    def iter_entries(self) -> Iterator[RatingTriple]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingTriple(u, i, r)

    @property
    def entries(self) -> list[RatingTriple]:
        return list(self.iter_entries())

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {ext: k for k, ext in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {ext: k for k, ext in enumerate(self.item_ids)}

    # ── Adjacency views ───────────────────────────────────────────────────────

    @cached_property
    def by_user(self) -> Adjacency:
        return _build_csr(self.users, self.items, self.ratings, self.num_users, self.num_items)

    @cached_property
    def by_item(self) -> Adjacency:
        return _build_csr(self.items, self.users, self.ratings, self.num_items, self.num_users)

    @cached_property
    def entity_graph(self) -> Adjacency:
        bu, bi = self.by_user, self.by_item
        indptr = np.concatenate([bu.indptr, bu.indptr[-1] + bi.indptr[1:]])
        return Adjacency(
            indptr=_frozen(indptr),
            indices=_frozen(np.concatenate([bu.indices + self.num_users, bi.indices])),
            ratings=_frozen(np.concatenate([bu.ratings, bi.ratings])),
        )

    def subset(self, positions: np.ndarray) -> "HdiDataset":
        """Entries at the given positions, same entity universe and ID maps."""
        positions = np.asarray(positions, dtype=np.int64)
        return HdiDataset(
            self.users[positions],
            self.items[positions],
            self.ratings[positions],
            self.num_users,
            self.num_items,
            self.user_ids,
            self.item_ids,
        )


# ── Parsing ───────────────────────────────────────────────────────────────────

def _decode(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line_number = raw.count(b"\n", 0, exc.start) + 1
        bad = raw[exc.start : exc.end]
        raise DatasetParseError(f"invalid UTF-8 byte sequence {bad!r}", line_number) from None


def _read_text(source: Source) -> str:
    if isinstance(source, bytes):
        return _decode(source)
    if isinstance(source, str):
        return source
    raw = source.read()
    return _decode(raw) if isinstance(raw, bytes) else raw


def _is_data_line(line: str) -> bool:
    return bool(line) and not line.startswith("#")


def detect_delimiter(text: str) -> Optional[str]:
    """Pick '::', tab, comma or whitespace from the first data line."""
    for raw in text.splitlines():
        line = raw.strip()
        if not _is_data_line(line):
            continue
        if "::" in line:
            return "::"
        if "\t" in line:
            return "\t"
        if "," in line:
            return ","
        return None
    return None


def _resolve_delimiter(delimiter: Optional[str], text: str) -> Optional[str]:
    if delimiter is None or delimiter == "auto":
        return detect_delimiter(text)
    if delimiter in DELIMITERS:
        return DELIMITERS[delimiter]
    if delimiter == "\\t":
        return "\t"
    return delimiter


class _IdMap:
    """Dense first-appearance remapping of external tokens."""

    def __init__(self) -> None:
        self.index: dict[str, int] = {}
        self.tokens: list[str] = []

    def __call__(self, token: str) -> int:
        k = self.index.get(token)
        if k is None:
            k = len(self.tokens)
            self.index[token] = k
            self.tokens.append(token)
        return k


def _parse_lines(
    text: str,
    delimiter: Optional[str],
    user_map: _IdMap,
    item_map: _IdMap,
) -> tuple[list[int], list[int], list[float]]:
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    seen: dict[tuple[int, int], int] = {}

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not _is_data_line(line):
            continue
        if delimiter is None:
            fields = line.split()
        else:
            fields = [f.strip() for f in line.split(delimiter)]
        if len(fields) < 3 or not fields[0] or not fields[1]:
            raise DatasetParseError(
                f"expected user, item and rating fields, got {raw!r}", line_number
            )
        try:
            rating = float(fields[2])
        except ValueError:
            raise DatasetParseError(f"rating {fields[2]!r} is not numeric", line_number) from None
        if not math.isfinite(rating):
            raise DatasetParseError(f"rating {fields[2]!r} is not finite", line_number)

        u = user_map(fields[0])
        i = item_map(fields[1])
        position = seen.get((u, i))
        if position is None:
            seen[(u, i)] = len(ratings)
            users.append(u)
            items.append(i)
            ratings.append(rating)
        else:
            # duplicate pair: first position, last rating
            ratings[position] = rating

    return users, items, ratings


def parse_ratings(source: Source, delimiter: Optional[str] = "auto") -> HdiDataset:
    """
    Parse delimited ``user item rating [extra...]`` lines into an HdiDataset.

    External IDs are densely remapped in first-appearance order. ``#`` lines
    are comments. Duplicate (user, item) pairs keep the position of the first
    occurrence and the rating of the last.
    """
    return parse_aligned([source], delimiter)[0]


def parse_aligned(sources: Sequence[Source], delimiter: Optional[str] = "auto") -> list[HdiDataset]:
    """
    Parse several rating sources against one shared entity universe.

    IDs are remapped in first-appearance order across the sources in the given
    order, so a train/validation/test triple written by ``split`` reloads with
    consistent indices and cold entities in later files still get a factor row.
    """
    user_map, item_map = _IdMap(), _IdMap()
    parsed = []
    for source in sources:
        text = _read_text(source)
        resolved = _resolve_delimiter(delimiter, text)
        users, items, ratings = _parse_lines(text, resolved, user_map, item_map)
        if not ratings:
            raise DatasetParseError("input contains no rating entries")
        parsed.append((users, items, ratings))

    datasets = [
        HdiDataset(
            np.array(users, dtype=np.int64),
            np.array(items, dtype=np.int64),
            np.array(ratings, dtype=np.float64),
            len(user_map.tokens),
            len(item_map.tokens),
            user_map.tokens,
            item_map.tokens,
        )
        for users, items, ratings in parsed
    ]
    for ds in datasets:
        logger.debug("parsed %r", ds)
    return datasets


def read_ratings(path: str | Path, delimiter: Optional[str] = "auto") -> HdiDataset:
    with open(path, "rb") as fh:
        return parse_ratings(fh, delimiter)


def read_aligned(paths: Iterable[str | Path], delimiter: Optional[str] = "auto") -> list[HdiDataset]:
    return parse_aligned([Path(p).read_bytes() for p in paths], delimiter)


# ── Serialization ─────────────────────────────────────────────────────────────

def dump_ratings(data: HdiDataset) -> str:
    """Canonical form: ``user<TAB>item<TAB>rating`` per entry, external IDs, entry order."""
    buf = io.StringIO()
    uid, iid = data.user_ids, data.item_ids
    for u, i, r in zip(data.users.tolist(), data.items.tolist(), data.ratings.tolist()):
        buf.write(f"{uid[u]}\t{iid[i]}\t{r!r}\n")
    return buf.getvalue()


def write_ratings(data: HdiDataset, path: str | Path) -> None:
    Path(path).write_text(dump_ratings(data), encoding="utf-8")


def checksum(data: HdiDataset) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(dump_ratings(data).encode("utf-8")).hexdigest()


def file_checksum(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


# ── Splitting ─────────────────────────────────────────────────────────────────

def _validate_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios, got {len(ratios)}")
    if any(not math.isfinite(r) or r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be positive, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios):.12g}")
    return float(ratios[0]), float(ratios[1]), float(ratios[2])


def part_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """
    Largest-remainder rounding of n·ratios; when n ≥ 3 no part is empty.

    Ties on the fractional remainder go to the earlier part.
    """
    exact = [n * r for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in exact]
    leftover = n - sum(sizes)
    by_remainder = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in by_remainder[:leftover]:
        sizes[k] += 1
    if n >= len(ratios):
        for k in range(len(sizes)):
            if sizes[k] == 0:
                donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
                sizes[donor] -= 1
                sizes[k] = 1
    return sizes


def split_dataset(
    data: HdiDataset,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    stratify: bool = False,
) -> tuple[HdiDataset, HdiDataset, HdiDataset]:
    """
    Seeded random train/validation/test split over a shared entity universe.

    Global mode shuffles all entries once and cuts by ``part_sizes``.
    Stratified mode applies the same rule to each user's entries separately
    (users with fewer than three ratings go entirely to train).
    Within each part entries keep their original relative order.
    """
    ratios = _validate_ratios(ratios)
    n = len(data)
    if n < 3:
        raise ConfigError(f"need at least 3 entries to split, got {n}")

    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[], [], []]

    if not stratify:
        perm = rng.permutation(n)
        sizes = part_sizes(n, ratios)
        bounds = np.cumsum([0] + sizes)
        for k in range(3):
            buckets[k].append(perm[bounds[k]:bounds[k + 1]])
    else:
        by_user = np.argsort(data.users, kind="stable")
        starts = np.searchsorted(data.users[by_user], np.arange(data.num_users + 1))
        for u in range(data.num_users):
            own = by_user[starts[u]:starts[u + 1]]
            if len(own) < 3:
                buckets[0].append(own)
                continue
            own = own[rng.permutation(len(own))]
            bounds = np.cumsum([0] + part_sizes(len(own), ratios))
            for k in range(3):
                buckets[k].append(own[bounds[k]:bounds[k + 1]])

    parts = []
    for chunks in buckets:
        positions = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        parts.append(data.subset(positions))
    logger.info(
        "split %d entries into %d/%d/%d (seed=%d, stratify=%s)",
        n, len(parts[0]), len(parts[1]), len(parts[2]), seed, stratify,
    )
    return parts[0], parts[1], parts[2]


# ── Synthetic data ────────────────────────────────────────────────────────────

def synthetic_low_rank(
    num_users: int,
    num_items: int,
    rank: int = 3,
    density: float = 0.3,
    noise: float = 0.01,
    seed: int = 0,
) -> HdiDataset:
    """
    Low-rank ground truth R = P*·Q*ᵀ + N(0, noise²) observed on random cells.

    P*, Q* entries ~ U(0, 1); round(density·|U|·|I|) distinct cells, sorted
    by (user, item).
    """
    if num_users < 1 or num_items < 1 or rank < 1:
        raise ConfigError("synthetic data needs at least one user, item and rank")
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"density must be in (0, 1], got {density}")

    rng = np.random.default_rng(seed)
    p_true = rng.uniform(0.0, 1.0, size=(num_users, rank))
    q_true = rng.uniform(0.0, 1.0, size=(num_items, rank))
    cells = num_users * num_items
    count = max(1, int(round(density * cells)))
    flat = np.sort(rng.choice(cells, size=count, replace=False))
    users = flat // num_items
    items = flat % num_items
    ratings = np.einsum("nk,nk->n", p_true[users], q_true[items])
    ratings = ratings + rng.normal(0.0, noise, size=count)
    return HdiDataset(users, items, ratings, num_users, num_items)


__all__ = [
    "RatingTriple",
    "Adjacency",
    "HdiDataset",
    "DELIMITERS",
    "detect_delimiter",
    "parse_ratings",
    "parse_aligned",
    "read_ratings",
    "read_aligned",
    "dump_ratings",
    "write_ratings",
    "checksum",
    "file_checksum",
    "part_sizes",
    "split_dataset",
    "synthetic_low_rank",
]
