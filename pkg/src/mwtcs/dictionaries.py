"""Dictionaries: overcomplete DCT frames, Kronecker products, online learning."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sparse import fista_gram
from .tensors_io import read_matrix, read_sidecar, write_matrix, write_sidecar

MAX_KRONECKER_ENTRIES = 64_000_000


@dataclass
class Dictionary:
    """``I x J`` matrix of unit-norm atoms (one per column)."""

    atoms: np.ndarray
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must be a 2-D matrix")
        norms = np.linalg.norm(self.atoms, axis=0)
        if np.max(np.abs(norms - 1.0)) > 1e-8:
            raise ValueError("dictionary columns must have unit norm")

    @property
    def n_pixels(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def save(self, path) -> None:
        write_matrix(path, self.atoms)
        write_sidecar(f"{path}.json", {"provenance": self.provenance, **self.meta})

    @classmethod
    def load(cls, path) -> Dictionary:
        meta = read_sidecar(f"{path}.json")
        prov = meta.pop("provenance")
        return cls(read_matrix(path), prov, meta)


def dct_frame_1d(m: int, n_atoms: int) -> np.ndarray:
    """``m x n_atoms`` overcomplete cosine frame with unit-norm columns.

    Column ``k`` samples ``cos(pi * k * (t + 1/2) / n_atoms)`` at ``t = 0..m-1``;
    for ``n_atoms == m`` this is the orthonormal DCT-II basis.
    """
    if n_atoms < m:
        raise ValueError("frame needs at least m atoms")
    t = np.arange(m)[:, None] + 0.5
    k = np.arange(n_atoms)[None, :]
    f = np.cos(np.pi * k * t / n_atoms)
    return f / np.linalg.norm(f, axis=0)


def kron_atoms(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    size = d1.shape[0] * d2.shape[0] * d1.shape[1] * d2.shape[1]
    if size > MAX_KRONECKER_ENTRIES:
        raise ValueError(f"Kronecker product would hold {size} entries (cap {MAX_KRONECKER_ENTRIES})")
    return np.kron(d1, d2)


def kronecker_dictionary(d1, d2) -> Dictionary:
    """Atoms ``d1 (x) d2``.

    With ``d1`` acting on image rows and ``d2`` on columns, column
    ``j1 * J2 + j2`` is ``outer(d1[:, j1], d2[:, j2]).ravel()``, i.e. a
    row-major image like every contrast map.
    """
    a1 = d1.atoms if isinstance(d1, Dictionary) else np.asarray(d1, dtype=float)
    a2 = d2.atoms if isinstance(d2, Dictionary) else np.asarray(d2, dtype=float)
    for a in (a1, a2):
        if np.max(np.abs(np.linalg.norm(a, axis=0) - 1.0)) > 1e-8:
            raise ValueError("Kronecker factors need unit-norm columns")
    return Dictionary(kron_atoms(a1, a2), "kronecker")


def dct_dictionary(m: int, overcompleteness: float = 1.0) -> Dictionary:
    """2-D overcomplete DCT on an ``m x m`` grid (``m^2`` rows)."""
    if overcompleteness < 1:
        raise ValueError("overcompleteness must be >= 1")
    n1 = int(math.ceil(m * math.sqrt(overcompleteness) - 1e-9))
    f = dct_frame_1d(m, n1)
    d = kronecker_dictionary(f, f)
    return Dictionary(d.atoms, "dct", {"m": m, "overcompleteness": overcompleteness})


def _fix_signs(atoms: np.ndarray, codes: np.ndarray | None = None):
    """Flip atoms so their first nonzero entry is positive (codes follow)."""
    first = np.argmax(np.abs(atoms) > 1e-12, axis=0)
    sign = np.sign(atoms[first, np.arange(atoms.shape[1])])
    sign[sign == 0] = 1.0
    atoms *= sign
    if codes is not None:
        codes *= sign[:, None]
    return atoms


@dataclass
class LearningResult:
    dictionary: Dictionary
    trace: list[float]
    codes: np.ndarray  # J x T sparse codes from the last pass
    reinitialised: list[int]


def coding_objective(atoms, data, codes, lambda_reg) -> float:
    """Mean over samples of ``0.5 ||x - D s||^2 + lambda_reg ||s||_1``.

    ``data`` is ``T x I`` (one sample per row), ``codes`` is ``J x T``.
    """
    r = data.T - atoms @ codes
    return float(0.5 * np.mean(np.sum(r * r, axis=0)) + lambda_reg * np.mean(np.abs(codes).sum(axis=0)))


def sparse_code(atoms, data, lambda_reg, iters=200, codes0=None, step=None, tol=1e-7):
    """FISTA codes (``J x T``) of every row of ``data`` against ``atoms``."""
    codes, _ = fista_gram(_gram_apply(atoms), atoms.T @ data.T, lambda_reg, iters, step, codes0, tol=tol)
    return codes


def _gram_apply(atoms):
    # D^T (D v) is cheaper than a J x J Gram product when J > I
    return lambda v: atoms.T @ (atoms @ v)


def learn_dictionary(
    dataset,
    j_atoms: int,
    lambda_reg: float,
    epochs: int,
    batch_size: int = 256,
    seed: int = 0,
    *,
    fista_iters: int = 100,
    fista_tol: float = 1e-6,
    init="auto",
    callback=None,
) -> LearningResult:
    """Online dictionary learning with mini-batch sparse coding.

    Each epoch visits the samples in a seeded random order, one mini-batch at a
    time. For a batch, its codes are refreshed by warm-started FISTA against
    the current atoms; the sufficient statistics ``A = S S^T`` and
    ``B = X S^T`` are updated in place (old batch codes out, new in); then
    every atom gets one block-coordinate step

        u_j = d_j + (b_j - D a_j) / A_jj,   d_j = u_j / max(||u_j||, 1)

    after which the atom is rescaled to unit norm and its code row by the
    inverse factor, leaving ``D S`` unchanged and never growing the l1 term.
    Every sub-step therefore keeps the dataset objective from increasing.

    ``init`` selects the starting atoms: ``"dct"`` (overcomplete 2-D DCT,
    needs a square image and ``J`` a square number of atoms), ``"data"``
    (random normalised samples plus a little seeded noise), ``"auto"`` (DCT
    when possible, data otherwise) or an explicit ``I x J`` array.

    Atoms unused during an epoch are reset to a random (normalised) dataset
    sample; their codes are zero so the objective is unaffected. The first
    nonzero entry of every returned atom is positive.

    Returns the dictionary, the per-epoch mean objective (entry 0 is the
    objective of the initial codes), the final codes and the reset atoms.
    """
    x = np.asarray(dataset, dtype=float)
    t_count, i_dim = x.shape
    if t_count < batch_size:
        raise ValueError("dataset smaller than one batch")
    zero_rows = np.count_nonzero(~x.any(axis=1))
    if zero_rows > 0.5 * t_count:
        raise ValueError(f"degenerate dataset: {zero_rows} of {t_count} rows are all zero")
    if j_atoms < i_dim:
        warnings.warn(f"undercomplete dictionary ({j_atoms} atoms for {i_dim} pixels)", stacklevel=2)
    rng = np.random.default_rng(seed)

    nonzero = np.flatnonzero(x.any(axis=1))
    d = _initial_atoms(init, x, nonzero, j_atoms, rng)
    s = np.zeros((j_atoms, t_count))
    trace: list[float] = []
    reset: list[int] = []
    if epochs == 0:
        return LearningResult(Dictionary(d, "learned", {"epochs": 0}), trace, s, reset)

    # initial coding pass so the first objective refers to a consistent state
    for lo in range(0, t_count, 2048):
        s[:, lo:lo + 2048] = sparse_code(d, x[lo:lo + 2048], lambda_reg, fista_iters, tol=fista_tol)
    trace.append(coding_objective(d, x, s, lambda_reg))
    a_stat = s @ s.T
    b_stat = x.T @ s.T

    for epoch in range(epochs):
        used = np.zeros(j_atoms, dtype=bool)
        order = rng.permutation(t_count)
        gram = _gram_apply(d)
        for lo in range(0, t_count, batch_size):
            idx = order[lo:lo + batch_size]
            xb = x[idx]
            old = s[:, idx]
            new, _ = fista_gram(gram, d.T @ xb.T, lambda_reg, fista_iters, None, old, tol=fista_tol)
            a_stat += new @ new.T - old @ old.T
            b_stat += xb.T @ (new - old).T
            s[:, idx] = new
            used |= np.any(new != 0, axis=1)
            _update_atoms(d, s, a_stat, b_stat)
        # statistics drift slowly under incremental updates
        a_stat = s @ s.T
        b_stat = x.T @ s.T
        dead = np.flatnonzero(~used & ~np.any(s != 0, axis=1))
        for j in dead:
            sample = x[rng.choice(nonzero)]
            d[:, j] = sample / np.linalg.norm(sample)
            reset.append(int(j))
        trace.append(coding_objective(d, x, s, lambda_reg))
        if callback is not None:
            callback(epoch, d, trace[-1])
        assert np.allclose(np.linalg.norm(d, axis=0), 1.0, atol=1e-8)
    _fix_signs(d, s)
    meta = {"epochs": epochs, "lambda_reg": lambda_reg, "batch_size": batch_size,
            "seed": seed, "fista_iters": fista_iters, "n_train": t_count}
    return LearningResult(Dictionary(d, "learned", meta), trace, s, reset)


def _initial_atoms(init, x, nonzero, j_atoms, rng):
    i_dim = x.shape[1]
    m = math.isqrt(i_dim)
    q = math.isqrt(j_atoms)
    dct_ok = m * m == i_dim and q * q == j_atoms and q >= m
    if isinstance(init, str):
        if init == "auto":
            init = "dct" if dct_ok else "data"
        if init == "dct":
            if not dct_ok:
                raise ValueError("DCT initialisation needs square images and a square atom count")
            f = dct_frame_1d(m, q)
            return np.kron(f, f)
        if init != "data":
            raise ValueError(f"unknown init {init!r}")
        pick = rng.choice(nonzero, size=j_atoms, replace=j_atoms > nonzero.size)
        d = x[pick].T.copy()
        d += 1e-3 * rng.standard_normal(d.shape) * np.linalg.norm(d, axis=0).mean() / math.sqrt(i_dim)
        return d / np.linalg.norm(d, axis=0)
    d = np.array(init, dtype=float)
    if d.shape != (i_dim, j_atoms):
        raise ValueError(f"init has shape {d.shape}, expected {(i_dim, j_atoms)}")
    return d / np.linalg.norm(d, axis=0)


def _update_atoms(d, s, a_stat, b_stat):
    """One block-coordinate sweep over the atoms; edits ``d``, ``s`` and the stats in place."""
    for j in range(d.shape[1]):
        ajj = a_stat[j, j]
        if ajj <= 1e-12:
            continue
        u = d[:, j] + (b_stat[:, j] - d @ a_stat[:, j]) / ajj
        nrm = np.linalg.norm(u)
        if nrm < 1e-12:
            continue
        scale = max(nrm, 1.0)
        # projected onto the unit ball first; rescale to the sphere and move
        # the factor into the codes so D S is unchanged
        c = nrm / scale
        d[:, j] = u / nrm
        if c != 1.0:
            s[j] *= c
            a_stat[j, :] *= c
            a_stat[:, j] *= c
            b_stat[:, j] *= c
