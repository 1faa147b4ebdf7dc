"""L2 normalization and PCA whitening of global descriptors."""

from dataclasses import dataclass

import numpy as np

from .binio import expect_eof, expect_magic, read_f32, read_u32, write_f32, write_u32
from .errors import DegenerateVectorError, ShapeError

WHITEN_MAGIC = b"IRWHITV1"
EIG_REG = 1e-6


def l2_normalize(v, axis=-1):
    """Scale ``v`` (or each row along ``axis``) to unit Euclidean norm.

    Raises DegenerateVectorError if any vector has zero norm.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError("cannot L2-normalize a zero vector")
    return v / norm


def is_normalized(v, tol=1e-6):
    v = np.asarray(v, dtype=np.float64)
    return bool(np.all(np.abs(np.linalg.norm(v, axis=-1) - 1.0) <= tol))


def jacobi_eigh(A, tol=1e-10, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps all (p, q) pairs in row order until the off-diagonal Frobenius
    norm drops to ``tol``. Returns ``(eigenvalues, eigenvectors)`` with
    eigenvectors as columns, unsorted.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError("matrix must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix must be symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)

    def off_norm():
        off = A - np.diag(np.diag(A))
        return np.sqrt((off * off).sum())

    for _ in range(max_sweeps):
        if off_norm() <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                g = 100.0 * abs(apq)
                if abs(A[p, p]) + g == abs(A[p, p]) and abs(A[q, q]) + g == abs(A[q, q]):
                    # below rounding of both diagonal entries
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                v_p, v_q = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * v_p - s * v_q
                V[:, q] = s * v_p + c * v_q
    else:
        if off_norm() > tol:
            raise RuntimeError("Jacobi eigensolver did not converge in %d sweeps" % max_sweeps)
    return np.diag(A).copy(), V


@dataclass(frozen=True)
class Whitener:
    mean: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray = None

    @property
    def in_dim(self):
        return self.mean.shape[0]

    @property
    def out_dim(self):
        return self.projection.shape[0]

    def truncate(self, out_dim):
        """Keep the ``out_dim`` leading whitening directions."""
        if not 1 <= out_dim <= self.out_dim:
            raise ValueError("out_dim must lie in [1, %d]" % self.out_dim)
        eig = None if self.eigenvalues is None else self.eigenvalues[:out_dim]
        return Whitener(self.mean, self.projection[:out_dim], eig)


def fit_whitener(X, out_dim=None):
    """Fit PCA whitening on the rows of ``X``.

    Covariance uses the 1/n convention. Eigenvectors are sign-fixed so that
    the largest-magnitude entry is positive, then scaled by
    ``1 / sqrt(lambda + 1e-6)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("descriptors must form an n x d matrix")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 descriptors to fit a whitener, got %d" % n)
    out_dim = d if out_dim is None else int(out_dim)
    if not 1 <= out_dim <= d:
        raise ValueError("out_dim %d outside [1, %d]" % (out_dim, d))
    mean = X.sum(axis=0) / n
    centered = X - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = jacobi_eigh(cov)
    order = np.argsort(-eigvals, kind="stable")[:out_dim]
    eigvals = eigvals[order]
    vecs = eigvecs[:, order].T
    lead = np.abs(vecs).argmax(axis=1)
    signs = np.sign(vecs[np.arange(out_dim), lead])
    vecs = vecs * signs[:, None]
    # clipped at 0: tiny negative eigenvalues come from rounding
    scale = 1.0 / np.sqrt(np.maximum(eigvals, 0.0) + EIG_REG)
    return Whitener(mean, vecs * scale[:, None], eigvals)


def apply_whitener(w, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != w.in_dim:
        raise ShapeError("descriptor dim %d != whitener in_dim %d" % (v.shape[-1], w.in_dim))
    return (v - w.mean) @ w.projection.T


def postprocess(w, v):
    """L2 -> whiten -> L2, row-wise for a matrix input."""
    return l2_normalize(apply_whitener(w, l2_normalize(v)))


def save_whitener(w, path):
    with open(path, "wb") as fh:
        fh.write(WHITEN_MAGIC)
        write_u32(fh, w.in_dim, w.out_dim)
        write_f32(fh, w.mean)
        write_f32(fh, w.projection)


def load_whitener(path):
    with open(path, "rb") as fh:
        expect_magic(fh, WHITEN_MAGIC)
        in_dim, out_dim = read_u32(fh, 2)
        if out_dim > in_dim or out_dim < 1:
            raise ShapeError("invalid whitener dims %d -> %d" % (in_dim, out_dim))
        mean = read_f32(fh, in_dim)
        proj = read_f32(fh, in_dim * out_dim).reshape(out_dim, in_dim)
        expect_eof(fh)
    return Whitener(mean, proj)
