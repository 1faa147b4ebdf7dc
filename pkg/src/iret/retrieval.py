"""Descriptor database and exhaustive cosine search."""

from dataclasses import dataclass

import numpy as np

from .binio import expect_eof, expect_magic, read_f32, read_u32, write_f32, write_u32
from .errors import DataError, ShapeError
from .evaluate import RankedList

DB_MAGIC = b"IRDESCV1"
UNIT_TOL = 1e-5


@dataclass(frozen=True)
class DescriptorDB:
    matrix: np.ndarray
    ids: tuple

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


def _check_unit(rows, tol, what):
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise DataError("%s is not L2-normalized" % what)


def build_db(entries):
    """``entries``: iterable of ``(image_id, descriptor)``; insertion order is kept."""
    entries = list(entries)
    if not entries:
        raise DataError("cannot build an empty database")
    ids = tuple(str(i) for i, _ in entries)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate image ids in database")
    dims = {np.shape(v) for _, v in entries}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError("descriptors have mixed dimensions: %s" % sorted(dims))
    matrix = np.array([v for _, v in entries], dtype=np.float64)
    _check_unit(matrix, UNIT_TOL, "database row")
    return DescriptorDB(matrix, ids)


def rank(ids, scores, k=None):
    """Order by descending score, ties by ascending id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    if k is not None:
        order = order[:k]
    return [(ids[i], float(scores[i])) for i in order]


def query(db, q, k=None, query_id="query"):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (db.dim,):
        raise ShapeError("query dim %s != database dim %d" % (q.shape, db.dim))
    _check_unit(q, 1e-6, "query descriptor")
    scores = db.matrix @ q
    return RankedList(query_id, rank(db.ids, scores, k))


def save_db(db, path, ids_path=None):
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        write_u32(fh, db.n, db.dim)
        write_f32(fh, db.matrix)
    with open(ids_path or path + ".ids", "w") as fh:
        fh.writelines(i + "\n" for i in db.ids)


def load_db(path, ids_path=None):
    """Read a database; rows are checked at f32 precision."""
    with open(path, "rb") as fh:
        expect_magic(fh, DB_MAGIC)
        n, d = read_u32(fh, 2)
        matrix = read_f32(fh, n * d).reshape(n, d)
        expect_eof(fh)
    with open(ids_path or path + ".ids") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != n:
        raise DataError("id sidecar has %d lines for %d rows" % (len(ids), n))
    return build_db(zip(ids, matrix))


def write_rankings(rankings, path):
    """TSV ``query_id<TAB>rank<TAB>image_id<TAB>score`` with 1-based ranks."""
    with open(path, "w") as fh:
        for r in rankings:
            for pos, (image_id, score) in enumerate(r.entries, 1):
                fh.write("%s\t%d\t%s\t%.6f\n" % (r.query_id, pos, image_id, score))


def read_rankings(path):
    by_query = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise DataError("%s:%d: expected 4 tab-separated fields" % (path, lineno))
            qid, pos, image_id, score = parts
            by_query.setdefault(qid, []).append((int(pos), image_id, float(score)))
    return {
        qid: RankedList(qid, [(i, s) for _, i, s in sorted(rows)])
        for qid, rows in by_query.items()
    }
