"""Linear measurement operators and dictionary-based sparse recovery.

Images are real row-major vectors of length ``I = m * m``. Every operator
is a real :class:`~mwtcs.sparse.LinearOperator`; the Fourier operator returns
the kept coefficients as ``[real parts; imaginary parts]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dictionaries import Dictionary
from .sparse import LinearOperator, SolveResult, fista, omp

# above this many entries Phi @ D is applied matrix-free
MATERIALISE_CAP = 4_000_000


@dataclass(frozen=True)
class MeasurementOperator:
    kind: str
    params: dict
    op: LinearOperator

    @property
    def shape(self):
        return self.op.shape

    def apply(self, x):
        return self.op.apply(x)

    def apply_adjoint(self, y):
        return self.op.apply_adjoint(y)


def _side(i_dim: int) -> int:
    m = math.isqrt(i_dim)
    if m * m != i_dim:
        raise ValueError(f"{i_dim} pixels do not form a square image")
    return m


def _index_set(indices, upper: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= upper):
        raise ValueError(f"{what} indices must lie in [0, {upper})")
    if np.unique(idx).size != idx.size:
        raise ValueError(f"duplicate {what} indices")
    return np.sort(idx)


def make_mask_operator(kept_pixels, i_dim: int) -> MeasurementOperator:
    """Keep a subset of pixels (inpainting); the adjoint scatters back with zeros."""
    kept = _index_set(kept_pixels, i_dim, "pixel")

    def adjoint(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros((i_dim,) + y.shape[1:])
        out[kept] = y
        return out

    return MeasurementOperator(
        "mask", {"kept": kept, "i_dim": i_dim},
        LinearOperator(lambda x: np.asarray(x, dtype=float)[kept], adjoint, i_dim, kept.size),
    )


def make_blur_downsample_operator(factor: int, i_dim: int) -> MeasurementOperator:
    """Average non-overlapping ``factor x factor`` blocks (superresolution)."""
    m = _side(i_dim)
    if factor < 1 or m % factor:
        raise ValueError(f"factor {factor} does not divide the grid side {m}")
    n = m // factor

    def apply(x):
        x = np.asarray(x, dtype=float)
        tail = x.shape[1:]
        blocks = x.reshape((n, factor, n, factor) + tail)
        return blocks.mean(axis=(1, 3)).reshape((n * n,) + tail)

    def adjoint(y):
        y = np.asarray(y, dtype=float)
        tail = y.shape[1:]
        img = y.reshape((n, 1, n, 1) + tail) / factor**2
        return np.broadcast_to(img, (n, factor, n, factor) + tail).reshape((i_dim,) + tail).copy()

    return MeasurementOperator("blur_downsample", {"factor": factor, "i_dim": i_dim},
                               LinearOperator(apply, adjoint, i_dim, n * n))


def make_fourier_subsample_operator(kept_freqs, m: int) -> MeasurementOperator:
    """Selected coefficients of the unitary 2-D DFT, realified as ``[Re; Im]``.

    Frequency index ``f`` is the row-major position ``u * m + v`` in the
    ``m x m`` spectrum (``u`` along rows). The operator has ``2 |kept|`` rows.
    """
    i_dim = m * m
    kept = _index_set(kept_freqs, i_dim, "frequency")
    k = kept.size

    def apply(x):
        x = np.asarray(x, dtype=float)
        tail = x.shape[1:]
        spec = np.fft.fft2(x.reshape((m, m) + tail), axes=(0, 1), norm="ortho")
        sel = spec.reshape((i_dim,) + tail)[kept]
        return np.concatenate([sel.real, sel.imag], axis=0)

    def adjoint(y):
        y = np.asarray(y, dtype=float)
        tail = y.shape[1:]
        full = np.zeros((i_dim,) + tail, dtype=complex)
        full[kept] = y[:k] + 1j * y[k:]
        img = np.fft.ifft2(full.reshape((m, m) + tail), axes=(0, 1), norm="ortho")
        return img.real.reshape((i_dim,) + tail)

    return MeasurementOperator("fourier_subsample", {"kept": kept, "m": m},
                               LinearOperator(apply, adjoint, i_dim, 2 * k))


def random_mask(i_dim: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(fraction * i_dim))
    return np.sort(rng.choice(i_dim, size=n, replace=False))


def radial_frequency_set(m: int, n_spokes: int) -> np.ndarray:
    """Frequencies on ``n_spokes`` lines through DC (interferometric / radial sampling)."""
    idx = set()
    c = m // 2
    for ang in np.pi * np.arange(n_spokes) / n_spokes:
        for r in np.linspace(-m, m, 4 * m + 1):
            u = int(round(c + r * np.sin(ang)))
            v = int(round(c + r * np.cos(ang)))
            if 0 <= u < m and 0 <= v < m:
                # centred coordinates back to the unshifted DFT layout
                idx.add(((u - c) % m) * m + (v - c) % m)
    return np.array(sorted(idx), dtype=np.int64)


def radial_fraction_set(m: int, fraction: float) -> np.ndarray:
    """Smallest radial set with at least ``fraction`` of all frequencies."""
    for spokes in range(1, 4 * m + 1):
        idx = radial_frequency_set(m, spokes)
        if idx.size >= fraction * m * m:
            return idx
    return np.arange(m * m)


@dataclass
class Recovery:
    image: np.ndarray
    solve: SolveResult

    @property
    def code(self):
        return self.solve.code


def sensing_operator(op: MeasurementOperator, dictionary: Dictionary,
                     cap: int = MATERIALISE_CAP) -> LinearOperator:
    """``Phi D`` as a linear operator; dense only while it stays under ``cap`` entries."""
    phi = op.op
    if phi.in_dim != dictionary.n_pixels:
        raise ValueError("operator input size differs from the dictionary's pixel count")
    d = LinearOperator.from_matrix(dictionary.atoms)
    if phi.out_dim * dictionary.n_atoms <= cap:
        return LinearOperator.from_matrix(phi.apply(dictionary.atoms))
    return phi.compose(d)


def recover_sparse(op: MeasurementOperator, dictionary: Dictionary, y, solver: str = "fista",
                   **params) -> Recovery:
    """Solve ``y = Phi D s`` for a sparse ``s`` and return ``x = D s``.

    ``solver="fista"`` takes ``lambda_reg`` (default ``1e-3 max|D~^T y|``),
    ``iters``, ``debiased`` and the other :func:`~mwtcs.sparse.fista` keywords;
    ``solver="omp"`` takes ``k_max`` and ``residual_tol``. OMP runs on
    column-normalised ``Phi D`` and the coefficients are rescaled back.
    """
    y = np.asarray(y, dtype=float)
    a = sensing_operator(op, dictionary, params.pop("cap", MATERIALISE_CAP))
    if solver == "fista":
        lam = params.pop("lambda_reg", None)
        if lam is None:
            lam = 1e-3 * float(np.max(np.abs(a.apply_adjoint(y)))) or 1e-12
        res = fista(a, y, lam, **params)
    elif solver == "omp":
        dense = a.to_dense()
        norms = np.linalg.norm(dense, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        res = omp(LinearOperator.from_matrix(dense / safe), y, **params)
        res.code.coefficients = np.where(norms > 0, res.x / safe, 0.0)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return Recovery(dictionary.atoms @ res.x, res)
