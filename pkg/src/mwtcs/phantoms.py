"""Random-circle contrast phantoms.

Images are M x M arrays flattened row-major into vectors of length I = M**2.
Pixel ``(r, c)`` has its centre at ``(c + 0.5, r + 0.5)`` in pixel units,
so circle centres and radii are given in the same units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensors_io import read_matrix, read_sidecar, write_matrix, write_sidecar

_MASK64 = (1 << 64) - 1

# Stream namespaces keep e.g. training and test phantoms disjoint.
NS_PHANTOM = 0
NS_TRAIN = 1
NS_TEST = 2
NS_HOLDOUT = 3


def splitmix64(z: int) -> int:
    """SplitMix64 finaliser: a bijective 64-bit avalanche mix."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, k: int, namespace: int = NS_PHANTOM) -> int:
    """Seed of element ``k`` in stream ``namespace`` of master ``seed``.

    ``splitmix64(splitmix64(splitmix64(seed) ^ namespace) ^ k)``. Each stage is a
    bijection, so for a fixed (seed, namespace) distinct ``k`` never collide.
    """
    h = splitmix64(seed & _MASK64)
    h = splitmix64(h ^ (namespace & _MASK64))
    return splitmix64(h ^ (k & _MASK64))


@dataclass(frozen=True)
class CirclePhantomSpec:
    n_circles_range: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (2.0, 5.0)
    epsilon_r_range: tuple[float, float] = (1.5, 2.0)
    grid_pixels_per_side: int = 16

    def __post_init__(self):
        lo, hi = self.n_circles_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad n_circles_range {self.n_circles_range}")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad radius_range {self.radius_range}")
        if rhi >= self.grid_pixels_per_side / 2:
            raise ValueError("radius max must be below M/2")
        elo, ehi = self.epsilon_r_range
        if not 1 < elo <= ehi:
            raise ValueError("epsilon_r_range must lie above 1")

    @property
    def n_pixels(self) -> int:
        return self.grid_pixels_per_side**2

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> CirclePhantomSpec:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class Circle:
    cx: float  # column coordinate, pixel units
    cy: float  # row coordinate, pixel units
    radius: float
    epsilon_r: float


def render_circles(circles, m: int) -> np.ndarray:
    """Rasterise circles onto an ``m x m`` grid; later circles overwrite earlier ones."""
    centres = np.arange(m) + 0.5
    xx, yy = np.meshgrid(centres, centres)  # xx varies along columns
    img = np.zeros((m, m))
    for c in circles:
        inside = (xx - c.cx) ** 2 + (yy - c.cy) ** 2 <= c.radius**2
        img[inside] = c.epsilon_r - 1.0
    return img.ravel()


def sample_circles(spec: CirclePhantomSpec, rng: np.random.Generator) -> list[Circle]:
    m = spec.grid_pixels_per_side
    n = int(rng.integers(spec.n_circles_range[0], spec.n_circles_range[1] + 1))
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.0, m, size=2)
        r = rng.uniform(*spec.radius_range)
        eps = rng.uniform(*spec.epsilon_r_range)
        out.append(Circle(float(cx), float(cy), float(r), float(eps)))
    return out


def generate_phantom(spec: CirclePhantomSpec, seed: int) -> np.ndarray:
    """One contrast map ``x = eps_r - 1`` (length M**2), deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return render_circles(sample_circles(spec, rng), spec.grid_pixels_per_side)


def generate_dataset(
    spec: CirclePhantomSpec, count: int, seed: int, namespace: int = NS_PHANTOM
) -> np.ndarray:
    """``count x I`` matrix whose row k is ``generate_phantom(spec, derive_seed(seed, k))``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, spec.n_pixels))
    for k in range(count):
        out[k] = generate_phantom(spec, derive_seed(seed, k, namespace))
    return out


def save_dataset(path, data: np.ndarray, spec: CirclePhantomSpec, seed: int,
                 namespace: int = NS_PHANTOM) -> None:
    """Persist as MTX1 plus a ``.json`` sidecar holding the spec and seed."""
    write_matrix(path, data)
    write_sidecar(f"{path}.json", {
        "kind": "phantom_dataset",
        "spec": spec.to_dict(),
        "seed": seed,
        "namespace": namespace,
        "count": int(data.shape[0]),
        "seed_rule": "splitmix64(splitmix64(splitmix64(seed) ^ namespace) ^ k)",
    })


def load_dataset(path) -> tuple[np.ndarray, dict]:
    return read_matrix(path), read_sidecar(f"{path}.json")
