"""Sparse rating storage, ingestion, value scaling, and splits.

Entries live in coordinate form (row, col, value). Values are either in the
original rating domain [alpha, beta] or linearly mapped onto [-1, 1] via
``(v - mu) / (mu - alpha)`` with ``mu = (alpha + beta) / 2``; the midpoint
maps to 0, which is also the fill value for unobserved coordinates when
dense input vectors are built.

Two ingestion formats are supported: ``UserID::MovieID::Rating::Timestamp``
lines and CSV with a ``user,item,rating`` header. Original identifiers are
reindexed to contiguous 0-based indices in order of first appearance, and
the mapping is kept for export.

Extendability bookkeeping: a fraction of rows/columns can be designated
"unseen"; observed entries then fall into four areas by whether their row
and column are seen (1: both, 2: row unseen, 3: column unseen, 4: neither).
The model trains on area-1 entries only; the other areas are evaluated
without retraining, with input vectors restricted to the seen universe.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ParseError, StateError
from .ndcore import Tensor
from .rng import stream

MANIFEST_FORMAT = "deepmf-split-manifest"
MANIFEST_VERSION = 1


class RatingMatrix:
    """Observed entries of a partially known n-by-m matrix.

    Immutable after construction. ``scaled`` says whether values are in the
    original [alpha, beta] domain or the model's [-1, 1] domain.
    """

    def __init__(self, n_rows, n_cols, rows, cols, values, alpha, beta,
                 scaled=False, user_ids=None, item_ids=None):
        if not beta > alpha:
            raise ConfigError(f"need beta > alpha, got [{alpha}, {beta}]")
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        cols = np.ascontiguousarray(cols, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise ConfigError("rows, cols, values must be equal-length 1-d arrays")
        if len(rows) == 0:
            raise ConfigError("no entries")
        if rows.min(initial=0) < 0 or rows.max(initial=0) >= n_rows:
            raise ConfigError("row index out of range")
        if cols.min(initial=0) < 0 or cols.max(initial=0) >= n_cols:
            raise ConfigError("column index out of range")
        keys = rows * np.int64(n_cols) + cols
        if len(np.unique(keys)) != len(keys):
            raise ConfigError("duplicate (row, column) entries")
        if scaled:
            if np.any(np.abs(values) > 1.0 + 1e-9):
                raise ConfigError("scaled values must lie in [-1, 1]")
        else:
            if np.any(values < alpha) or np.any(values > beta):
                raise ConfigError(f"values must lie in [{alpha}, {beta}]")
        for arr in (rows, cols, values):
            arr.setflags(write=False)
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.rows = rows
        self.cols = cols
        self.values = values
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.scaled = bool(scaled)
        self.user_ids = list(user_ids) if user_ids is not None else None
        self.item_ids = list(item_ids) if item_ids is not None else None

    @property
    def mu(self):
        return (self.alpha + self.beta) / 2.0

    @property
    def n_observed(self):
        return len(self.values)

    @property
    def density(self):
        return self.n_observed / (self.n_rows * self.n_cols)

    def __repr__(self):
        tag = "scaled" if self.scaled else "unscaled"
        return (f"RatingMatrix({self.n_rows}x{self.n_cols}, "
                f"{self.n_observed} observed, {tag})")


# --- scaling -----------------------------------------------------------------


def scale_values(values, alpha, beta):
    """Map [alpha, beta] linearly onto [-1, 1]."""
    mu = (alpha + beta) / 2.0
    return (np.asarray(values, dtype=np.float64) - mu) / (mu - alpha)


def unscale_values(values, alpha, beta):
    """Exact inverse of :func:`scale_values`."""
    mu = (alpha + beta) / 2.0
    return np.asarray(values, dtype=np.float64) * (mu - alpha) + mu


def scale(matrix):
    """A scaled copy of an unscaled matrix."""
    if matrix.scaled:
        raise StateError("matrix is already scaled")
    return RatingMatrix(
        matrix.n_rows, matrix.n_cols, matrix.rows, matrix.cols,
        scale_values(matrix.values, matrix.alpha, matrix.beta),
        matrix.alpha, matrix.beta, scaled=True,
        user_ids=matrix.user_ids, item_ids=matrix.item_ids,
    )


def unscale(matrix):
    """An unscaled copy of a scaled matrix."""
    if not matrix.scaled:
        raise StateError("matrix is not scaled")
    return RatingMatrix(
        matrix.n_rows, matrix.n_cols, matrix.rows, matrix.cols,
        unscale_values(matrix.values, matrix.alpha, matrix.beta),
        matrix.alpha, matrix.beta, scaled=False,
        user_ids=matrix.user_ids, item_ids=matrix.item_ids,
    )


# --- parsing -----------------------------------------------------------------


def _build_matrix(raw, alpha, beta, path):
    if not raw:
        raise ParseError(path, 0, "no entries")
    user_index, item_index = {}, {}
    rows, cols, vals = [], [], []
    seen_pairs = {}
    for line_no, user, item, value in raw:
        if value < alpha or value > beta:
            raise ParseError(
                path, line_no,
                f"rating {value} outside [{alpha}, {beta}]",
            )
        pair = (user, item)
        if pair in seen_pairs:
            raise ParseError(
                path, line_no,
                f"duplicate entry for ({user}, {item}), first seen on "
                f"line {seen_pairs[pair]}",
            )
        seen_pairs[pair] = line_no
        rows.append(user_index.setdefault(user, len(user_index)))
        cols.append(item_index.setdefault(item, len(item_index)))
        vals.append(value)
    return RatingMatrix(
        len(user_index), len(item_index), rows, cols, vals, alpha, beta,
        user_ids=list(user_index), item_ids=list(item_index),
    )


def parse_movielens(path, alpha=1.0, beta=5.0, separator="::"):
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines."""
    raw = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(separator)
            if len(parts) != 4:
                raise ParseError(
                    path, line_no,
                    f"expected 4 fields separated by {separator!r}, "
                    f"got {len(parts)}",
                )
            try:
                value = float(parts[2])
            except ValueError:
                raise ParseError(path, line_no, f"bad rating {parts[2]!r}") from None
            raw.append((line_no, parts[0], parts[1], value))
    return _build_matrix(raw, alpha, beta, path)


def parse_csv(path, alpha=1.0, beta=5.0):
    """Parse a UTF-8 CSV with header ``user,item,rating``."""
    raw = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 0, "no entries")
        if [h.strip().lower() for h in header] != ["user", "item", "rating"]:
            raise ParseError(path, 1, f"expected header user,item,rating, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, line_no, f"expected 3 columns, got {len(row)}")
            try:
                value = float(row[2])
            except ValueError:
                raise ParseError(path, line_no, f"bad rating {row[2]!r}") from None
            raw.append((line_no, row[0].strip(), row[1].strip(), value))
    return _build_matrix(raw, alpha, beta, path)


def parse_csv_rows(path, rating_optional=False):
    """Raw (line_no, user, item, rating) rows of a user,item[,rating] CSV.

    Used for side files (cold-entity observations, prediction batches);
    does not build a matrix. With ``rating_optional`` a two-column
    ``user,item`` file is accepted and ratings come back as None.
    """
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 0, "no rows")
        cols = [h.strip().lower() for h in header]
        if cols == ["user", "item", "rating"]:
            width = 3
        elif rating_optional and cols == ["user", "item"]:
            width = 2
        else:
            raise ParseError(path, 1, f"unexpected header {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(path, line_no,
                                 f"expected {width} columns, got {len(row)}")
            rating = None
            if width == 3:
                try:
                    rating = float(row[2])
                except ValueError:
                    raise ParseError(path, line_no,
                                     f"bad rating {row[2]!r}") from None
            rows.append((line_no, row[0].strip(), row[1].strip(), rating))
    if not rows:
        raise ParseError(path, 0, "no rows")
    return rows


def load_ratings(path, fmt, alpha=1.0, beta=5.0):
    if fmt == "movielens":
        return parse_movielens(path, alpha, beta)
    if fmt == "csv":
        return parse_csv(path, alpha, beta)
    raise ConfigError(f"unknown data format {fmt!r} (use 'movielens' or 'csv')")


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSets:
    """Disjoint train/validation/test partitions of entry indices."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def check_partition(self, n_entries):
        parts = [self.train, self.validation, self.test]
        combined = np.concatenate(parts)
        if len(combined) != n_entries or len(np.unique(combined)) != n_entries:
            raise ConfigError("split sets do not partition the entries")


def _allocate_counts(n, fractions):
    counts = [int(np.floor(f * n)) for f in fractions]
    remainder = n - sum(counts)
    # Largest remainder first; ties resolved by position.
    order = sorted(range(len(fractions)),
                   key=lambda k: (-(fractions[k] * n - np.floor(fractions[k] * n)), k))
    for k in order[:remainder]:
        counts[k] += 1
    return counts


def random_split(matrix, fractions, seed):
    """Seeded random partition of observed entries into train/val/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need 3 nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = matrix.n_observed
    counts = _allocate_counts(n, fractions)
    perm = stream(seed, "split").permutation(n)
    train = np.sort(perm[: counts[0]])
    val = np.sort(perm[counts[0] : counts[0] + counts[1]])
    test = np.sort(perm[counts[0] + counts[1] :])
    return SplitSets(train, val, test)


@dataclass(frozen=True)
class AreaSplit:
    """Partition of observed entries by seen/unseen row and column."""

    seen_rows: np.ndarray
    seen_cols: np.ndarray
    area1: np.ndarray
    area2: np.ndarray
    area3: np.ndarray
    area4: np.ndarray

    @property
    def areas(self):
        return {"area1": self.area1, "area2": self.area2,
                "area3": self.area3, "area4": self.area4}


def classify_areas(matrix, seen_rows, seen_cols):
    """Assign every observed entry to one of the four areas."""
    row_seen = np.zeros(matrix.n_rows, dtype=bool)
    row_seen[np.asarray(seen_rows, dtype=np.int64)] = True
    col_seen = np.zeros(matrix.n_cols, dtype=bool)
    col_seen[np.asarray(seen_cols, dtype=np.int64)] = True
    rs = row_seen[matrix.rows]
    cs = col_seen[matrix.cols]
    idx = np.arange(matrix.n_observed)
    return AreaSplit(
        seen_rows=np.sort(np.asarray(seen_rows, dtype=np.int64)),
        seen_cols=np.sort(np.asarray(seen_cols, dtype=np.int64)),
        area1=idx[rs & cs],
        area2=idx[~rs & cs],
        area3=idx[rs & ~cs],
        area4=idx[~rs & ~cs],
    )


def area_split(matrix, row_holdout, col_holdout, seed):
    """Randomly designate unseen rows/columns and classify the entries."""
    for name, frac in (("row", row_holdout), ("col", col_holdout)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"{name} holdout fraction must be in (0, 1), got {frac}")
    rng = stream(seed, "area")
    n_unseen_rows = int(round(row_holdout * matrix.n_rows))
    n_unseen_cols = int(round(col_holdout * matrix.n_cols))
    if n_unseen_rows >= matrix.n_rows:
        raise ConfigError("row holdout leaves no seen rows")
    if n_unseen_cols >= matrix.n_cols:
        raise ConfigError("column holdout leaves no seen columns")
    unseen_rows = rng.choice(matrix.n_rows, size=n_unseen_rows, replace=False)
    unseen_cols = rng.choice(matrix.n_cols, size=n_unseen_cols, replace=False)
    seen_rows = np.setdiff1d(np.arange(matrix.n_rows), unseen_rows)
    seen_cols = np.setdiff1d(np.arange(matrix.n_cols), unseen_cols)
    return classify_areas(matrix, seen_rows, seen_cols)


# --- dense input vectors -----------------------------------------------------


def row_vector(matrix, i, column_universe, visible=None):
    """Dense vector of row ``i`` over ``column_universe``.

    Coordinates follow the order of ``column_universe``; unobserved ones are
    filled with 0 (the scaled midpoint). ``visible`` optionally restricts
    which entry indices may contribute, masking e.g. validation/test values.
    """
    column_universe = np.asarray(column_universe, dtype=np.int64)
    if not 0 <= i < matrix.n_rows:
        raise IndexError(f"row {i} outside universe of {matrix.n_rows} rows")
    pos = np.full(matrix.n_cols, -1, dtype=np.int64)
    pos[column_universe] = np.arange(len(column_universe))
    mask = matrix.rows == i
    if visible is not None:
        vis = np.zeros(matrix.n_observed, dtype=bool)
        vis[np.asarray(visible, dtype=np.int64)] = True
        mask &= vis
    cols = matrix.cols[mask]
    vals = matrix.values[mask]
    keep = pos[cols] >= 0
    vec = np.zeros(len(column_universe))
    vec[pos[cols[keep]]] = vals[keep]
    return Tensor(vec)


def col_vector(matrix, j, row_universe, visible=None):
    """Dense vector of column ``j`` over ``row_universe`` (see row_vector)."""
    row_universe = np.asarray(row_universe, dtype=np.int64)
    if not 0 <= j < matrix.n_cols:
        raise IndexError(f"column {j} outside universe of {matrix.n_cols} columns")
    pos = np.full(matrix.n_rows, -1, dtype=np.int64)
    pos[row_universe] = np.arange(len(row_universe))
    mask = matrix.cols == j
    if visible is not None:
        vis = np.zeros(matrix.n_observed, dtype=bool)
        vis[np.asarray(visible, dtype=np.int64)] = True
        mask &= vis
    rows = matrix.rows[mask]
    vals = matrix.values[mask]
    keep = pos[rows] >= 0
    vec = np.zeros(len(row_universe))
    vec[pos[rows[keep]]] = vals[keep]
    return Tensor(vec)


class VectorSource:
    """Prebuilt CSR views for fast dense input-vector construction.

    Row vectors live on the seen-column universe, column vectors on the
    seen-row universe. Only ``visible`` entries (the train partition)
    contribute values, so validation/test labels never leak into inputs.
    Rows and columns outside the seen sets still get vectors: their visible
    entries on the seen universe act as the observations describing them.
    """

    def __init__(self, matrix, visible, seen_rows, seen_cols):
        if not matrix.scaled:
            raise StateError("VectorSource expects a scaled matrix")
        self.matrix = matrix
        seen_rows = np.sort(np.asarray(seen_rows, dtype=np.int64))
        seen_cols = np.sort(np.asarray(seen_cols, dtype=np.int64))
        self.seen_rows = seen_rows
        self.seen_cols = seen_cols
        self.n_seen = len(seen_rows)
        self.m_seen = len(seen_cols)
        self.row_pos = np.full(matrix.n_rows, -1, dtype=np.int64)
        self.row_pos[seen_rows] = np.arange(self.n_seen)
        self.col_pos = np.full(matrix.n_cols, -1, dtype=np.int64)
        self.col_pos[seen_cols] = np.arange(self.m_seen)

        visible = np.asarray(visible, dtype=np.int64)
        v_rows = matrix.rows[visible]
        v_cols = matrix.cols[visible]
        v_vals = matrix.values[visible]

        keep = self.col_pos[v_cols] >= 0
        order = np.lexsort((v_cols[keep], v_rows[keep]))
        self._row_ptr = np.zeros(matrix.n_rows + 1, dtype=np.int64)
        np.add.at(self._row_ptr[1:], v_rows[keep], 1)
        np.cumsum(self._row_ptr, out=self._row_ptr)
        self._row_cols = self.col_pos[v_cols[keep]][order]
        self._row_vals = v_vals[keep][order]

        keep = self.row_pos[v_rows] >= 0
        order = np.lexsort((v_rows[keep], v_cols[keep]))
        self._col_ptr = np.zeros(matrix.n_cols + 1, dtype=np.int64)
        np.add.at(self._col_ptr[1:], v_cols[keep], 1)
        np.cumsum(self._col_ptr, out=self._col_ptr)
        self._col_rows = self.row_pos[v_rows[keep]][order]
        self._col_vals = v_vals[keep][order]

    def row_batch(self, rows):
        """(len(rows), m_seen) dense matrix of row input vectors."""
        out = np.zeros((len(rows), self.m_seen))
        for k, i in enumerate(rows):
            lo, hi = self._row_ptr[i], self._row_ptr[i + 1]
            out[k, self._row_cols[lo:hi]] = self._row_vals[lo:hi]
        return out

    def col_batch(self, cols):
        """(len(cols), n_seen) dense matrix of column input vectors."""
        out = np.zeros((len(cols), self.n_seen))
        for k, j in enumerate(cols):
            lo, hi = self._col_ptr[j], self._col_ptr[j + 1]
            out[k, self._col_rows[lo:hi]] = self._col_vals[lo:hi]
        return out

    def row_vector(self, i):
        return self.row_batch([i])[0]

    def col_vector(self, j):
        return self.col_batch([j])[0]

    def vector_from_observations(self, pairs, axis):
        """Dense vector for a new row ("row") or column ("col") described by
        (global index, original-domain value) observations."""
        m = self.matrix
        vec = np.zeros(self.m_seen if axis == "row" else self.n_seen)
        pos = self.col_pos if axis == "row" else self.row_pos
        for j, value in pairs:
            if value < m.alpha or value > m.beta:
                raise ConfigError(
                    f"observation {value} outside [{m.alpha}, {m.beta}]")
            p = pos[j]
            if p < 0:
                continue  # outside the seen universe: no coordinate to fill
            vec[p] = scale_values(value, m.alpha, m.beta)
        return vec


# --- end-to-end task bundle --------------------------------------------------


@dataclass
class CompletionTask:
    """Everything training and evaluation need, built once per run."""

    matrix: RatingMatrix  # scaled
    values_orig: np.ndarray
    splits: SplitSets
    areas: "AreaSplit | None"
    source: VectorSource
    sgd_rows: np.ndarray
    sgd_cols: np.ndarray
    sgd_targets: np.ndarray  # scaled
    val_rows: np.ndarray
    val_cols: np.ndarray
    val_targets: np.ndarray  # original domain
    eval_groups: dict = field(default_factory=dict)

    @property
    def row_input_dim(self):
        return self.source.m_seen

    @property
    def col_input_dim(self):
        return self.source.n_seen


def build_task(matrix, splits, areas=None):
    """Assemble a :class:`CompletionTask` from an unscaled matrix and splits.

    With an area split, gradient descent and early-stopping validation use
    area-1 entries only; test entries are grouped per area for evaluation.
    """
    if matrix.scaled:
        raise StateError("build_task expects an unscaled matrix")
    splits.check_partition(matrix.n_observed)
    scaled = scale(matrix)
    if areas is None:
        seen_rows = np.arange(matrix.n_rows)
        seen_cols = np.arange(matrix.n_cols)
        area1_mask = np.ones(matrix.n_observed, dtype=bool)
    else:
        seen_rows = areas.seen_rows
        seen_cols = areas.seen_cols
        area1_mask = np.zeros(matrix.n_observed, dtype=bool)
        area1_mask[areas.area1] = True

    source = VectorSource(scaled, splits.train, seen_rows, seen_cols)

    sgd = splits.train[area1_mask[splits.train]]
    val = splits.validation[area1_mask[splits.validation]]

    eval_groups = {"overall": splits.test}
    if areas is not None:
        for name, idx in areas.areas.items():
            in_area = np.zeros(matrix.n_observed, dtype=bool)
            in_area[idx] = True
            eval_groups[name] = splits.test[in_area[splits.test]]

    return CompletionTask(
        matrix=scaled,
        values_orig=matrix.values,
        splits=splits,
        areas=areas,
        source=source,
        sgd_rows=scaled.rows[sgd],
        sgd_cols=scaled.cols[sgd],
        sgd_targets=scaled.values[sgd],
        val_rows=scaled.rows[val],
        val_cols=scaled.cols[val],
        val_targets=matrix.values[val],
        eval_groups=eval_groups,
    )


# --- split manifest ----------------------------------------------------------


def manifest_dict(seed, fractions, area_config, matrix, splits, areas):
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "fractions": {
            "train": fractions[0],
            "validation": fractions[1],
            "test": fractions[2],
        },
        "area_holdout": area_config,
        "alpha": matrix.alpha,
        "beta": matrix.beta,
        "counts": {
            "rows": matrix.n_rows,
            "cols": matrix.n_cols,
            "observed": matrix.n_observed,
            "train": len(splits.train),
            "validation": len(splits.validation),
            "test": len(splits.test),
        },
        "users": matrix.user_ids,
        "items": matrix.item_ids,
        "train": splits.train.tolist(),
        "validation": splits.validation.tolist(),
        "test": splits.test.tolist(),
    }
    if areas is not None:
        doc["seen_rows"] = areas.seen_rows.tolist()
        doc["seen_cols"] = areas.seen_cols.tolist()
        doc["areas"] = {k: v.tolist() for k, v in areas.areas.items()}
    else:
        doc["seen_rows"] = None
        doc["seen_cols"] = None
        doc["areas"] = None
    return doc


def write_manifest(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path} is not a split manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(
            f"manifest version {doc.get('version')} unsupported "
            f"(expected {MANIFEST_VERSION})"
        )
    return doc


def splits_from_manifest(doc):
    return SplitSets(
        train=np.asarray(doc["train"], dtype=np.int64),
        validation=np.asarray(doc["validation"], dtype=np.int64),
        test=np.asarray(doc["test"], dtype=np.int64),
    )


def areas_from_manifest(doc):
    if doc.get("areas") is None:
        return None
    areas = doc["areas"]
    return AreaSplit(
        seen_rows=np.asarray(doc["seen_rows"], dtype=np.int64),
        seen_cols=np.asarray(doc["seen_cols"], dtype=np.int64),
        area1=np.asarray(areas["area1"], dtype=np.int64),
        area2=np.asarray(areas["area2"], dtype=np.int64),
        area3=np.asarray(areas["area3"], dtype=np.int64),
        area4=np.asarray(areas["area4"], dtype=np.int64),
    )


def write_stats(path, matrix):
    """Human-readable dataset statistics (key: value lines)."""
    lines = [
        f"rows: {matrix.n_rows}",
        f"cols: {matrix.n_cols}",
        f"observed: {matrix.n_observed}",
        f"density: {matrix.density!r}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
