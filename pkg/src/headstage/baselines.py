"""Digitize-then-compress comparators: block DCT truncation and compressive sensing.

Both consume the full-rate signal, so their acquisition cost is always the
full-rate sample count; only the transmitted payload shrinks.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

COEFF_BITS = 16
MEASUREMENT_BITS = 16


@dataclass(frozen=True)
class DctConfig:
    block_len: int = 128
    keep_k: int = 16

    def __post_init__(self):
        if self.block_len <= 0:
            raise ValueError("block_len must be positive")
        if not 1 <= self.keep_k <= self.block_len:
            raise ValueError("keep_k must lie in [1, block_len]")

    @property
    def label(self) -> str:
        return f"N={self.block_len},k={self.keep_k}"

    def bits_per_block(self) -> int:
        """Each kept coefficient carries its value and its position."""
        return self.keep_k * (COEFF_BITS + math.ceil(math.log2(self.block_len)))


@dataclass(frozen=True)
class CsConfig:
    block_len: int = 128
    n_measurements: int = 32
    sensing_seed: int = 0
    sparsity_k: int | None = None
    identity: bool = False  # test hook: Phi = I, needs M == N

    def __post_init__(self):
        if self.block_len <= 0 or self.n_measurements <= 0:
            raise ValueError("block_len and n_measurements must be positive")
        if self.n_measurements > self.block_len:
            raise ValueError("n_measurements cannot exceed block_len")
        if self.sparsity_k is None:
            object.__setattr__(self, "sparsity_k", max(1, self.n_measurements // 4))
        if not 1 <= self.sparsity_k <= self.n_measurements:
            raise ValueError("sparsity_k must lie in [1, n_measurements]")
        if self.identity and self.n_measurements != self.block_len:
            raise ValueError("identity sensing needs n_measurements == block_len")

    @property
    def label(self) -> str:
        return f"N={self.block_len},M={self.n_measurements},k={self.sparsity_k}"

    @property
    def compression_ratio(self) -> float:
        return self.block_len / self.n_measurements

    def bits_per_block(self) -> int:
        return self.n_measurements * MEASUREMENT_BITS


# ---------------------------------------------------------------------------
# DCT
# ---------------------------------------------------------------------------


def _check_len(block, n: int) -> np.ndarray:
    x = np.asarray(block, dtype=float)
    if x.shape[-1] != n:
        raise ValueError(f"block length {x.shape[-1]} != {n}")
    return x


def dct_compress(block, cfg: DctConfig) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``keep_k`` largest-magnitude orthonormal DCT-II coefficients.

    Works on one block or a stack of blocks along the last axis; indices come
    back sorted ascending within each block.
    """
    x = _check_len(block, cfg.block_len)
    c = scipy.fft.dct(x, type=2, norm="ortho", axis=-1)
    # stable sort so ties resolve to the lower frequency
    order = np.argsort(-np.abs(c), axis=-1, kind="stable")[..., :cfg.keep_k]
    idx = np.sort(order, axis=-1)
    return idx, np.take_along_axis(c, idx, axis=-1)


def dct_decompress(indices, coefficients, cfg: DctConfig) -> np.ndarray:
    idx = np.asarray(indices)
    coef = np.asarray(coefficients, dtype=float)
    if idx.shape != coef.shape:
        raise ValueError("indices and coefficients differ in shape")
    if idx.size and (idx.min() < 0 or idx.max() >= cfg.block_len):
        raise ValueError("coefficient index outside the block")
    srt = np.sort(idx, axis=-1)
    if idx.shape[-1] > 1 and np.any(np.diff(srt, axis=-1) == 0):
        raise ValueError("duplicate coefficient indices")
    c = np.zeros(idx.shape[:-1] + (cfg.block_len,))
    np.put_along_axis(c, idx.astype(np.int64), coef, axis=-1)
    return scipy.fft.idct(c, type=2, norm="ortho", axis=-1)


# ---------------------------------------------------------------------------
# Compressive sensing
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _sensing_matrix_cached(m: int, n: int, seed: int, identity: bool) -> np.ndarray:
    if identity:
        phi = np.eye(n)
    else:
        phi = np.random.default_rng(seed).standard_normal((m, n))
        phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    phi.setflags(write=False)
    return phi


def sensing_matrix(cfg: CsConfig) -> np.ndarray:
    """Seeded Gaussian M x N matrix with unit-norm rows (read-only)."""
    return _sensing_matrix_cached(cfg.n_measurements, cfg.block_len, cfg.sensing_seed, cfg.identity)


@functools.lru_cache(maxsize=8)
def _idct_basis(n: int) -> np.ndarray:
    """Columns are the orthonormal DCT-II basis vectors."""
    psi = scipy.fft.idct(np.eye(n), type=2, norm="ortho", axis=0)
    psi.setflags(write=False)
    return psi


def cs_compress(block, cfg: CsConfig) -> np.ndarray:
    x = _check_len(block, cfg.block_len)
    return x @ sensing_matrix(cfg).T


def omp(A: np.ndarray, Y: np.ndarray, k: int, tol: float = 1e-12) -> np.ndarray:
    """Orthogonal matching pursuit, batched over the rows of ``Y``.

    Each row of ``Y`` is a measurement vector.  Atoms are picked by the
    largest normalised correlation with the residual; coefficients on the
    support are refit by least squares every step.  A block stops growing
    once its residual falls below ``tol`` times its measurement norm.
    Returns coefficient rows of width ``A.shape[1]``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n_blocks, _ = Y.shape
    n_atoms = A.shape[1]
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    gram = A.T @ A
    corr0 = Y @ A  # A^T y per block
    support = np.zeros((n_blocks, 0), dtype=np.int64)
    active = np.linalg.norm(Y, axis=1) > 0
    coef = np.zeros((n_blocks, 0))
    resid = Y.copy()
    stop = tol * np.linalg.norm(Y, axis=1)
    rows = np.arange(n_blocks)
    for step in range(min(k, n_atoms)):
        if not active.any():
            break
        score = np.abs(resid @ A) / norms
        if step:
            score[rows[:, None], support] = -1.0
        pick = np.argmax(score, axis=1)
        # finished blocks repeat an existing atom with a zero coefficient
        if step:
            pick = np.where(active, pick, support[:, 0])
        support = np.concatenate([support, pick[:, None]], axis=1)
        G = gram[support[:, :, None], support[:, None, :]]
        b = np.take_along_axis(corr0, support, axis=1)
        if step:
            # duplicate atoms of finished blocks make G singular: pin them
            dup = ~active
            G[dup, -1, :] = 0.0
            G[dup, :, -1] = 0.0
            G[dup, -1, -1] = 1.0
            b[dup, -1] = 0.0
        sol = np.linalg.solve(G, b[:, :, None])[:, :, 0]
        coef = np.where(active[:, None], sol, np.concatenate([coef, np.zeros((n_blocks, 1))], axis=1))
        resid = Y - np.einsum("bk,mbk->bm", coef, A[:, support])
        active &= np.linalg.norm(resid, axis=1) > stop
    out = np.zeros((n_blocks, n_atoms))
    if support.shape[1]:
        np.add.at(out, (rows[:, None].repeat(support.shape[1], 1), support), coef)
    return out


def cs_decompress(y, cfg: CsConfig) -> np.ndarray:
    """OMP recovery in the DCT dictionary; accepts one or many measurement rows."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != cfg.n_measurements:
        raise ValueError(f"expected {cfg.n_measurements} measurements, got {y.shape[-1]}")
    psi = _idct_basis(cfg.block_len)
    A = sensing_matrix(cfg) @ psi
    c = omp(A, y.reshape(-1, cfg.n_measurements), cfg.sparsity_k)
    x = c @ psi.T
    return x.reshape(y.shape[:-1] + (cfg.block_len,))


# ---------------------------------------------------------------------------
# Whole-signal helpers
# ---------------------------------------------------------------------------


def _blocks(x: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Split into length-``n`` blocks, padding the tail with the last value."""
    x = np.asarray(x, dtype=float)
    n_blocks = max(1, -(-len(x) // n))
    pad = n_blocks * n - len(x)
    fill = x[-1] if len(x) else 0.0
    return np.concatenate([x, np.full(pad, fill)]).reshape(n_blocks, n), n_blocks


def dct_roundtrip(x: np.ndarray, cfg: DctConfig) -> tuple[np.ndarray, int]:
    """Compress and reconstruct a whole channel; returns (signal, payload bits)."""
    blocks, n_blocks = _blocks(x, cfg.block_len)
    idx, coef = dct_compress(blocks, cfg)
    y = dct_decompress(idx, coef, cfg).reshape(-1)[:len(x)]
    return y, n_blocks * cfg.bits_per_block()


def cs_roundtrip(x: np.ndarray, cfg: CsConfig) -> tuple[np.ndarray, int]:
    blocks, n_blocks = _blocks(x, cfg.block_len)
    y = cs_decompress(cs_compress(blocks, cfg), cfg).reshape(-1)[:len(x)]
    return y, n_blocks * cfg.bits_per_block()
