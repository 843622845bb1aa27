"""2-D TM scattering forward model discretised by the method of moments.

Time convention is ``exp(+j w t)``; outgoing waves use the Hankel function
of the second kind. With ``g(rho) = (-j/4) H0^(2)(k rho)`` the continuous
Lippmann-Schwinger equation reads

    E_t(r) = E_i(r) + k^2 \\int g(|r - r'|) x(r') E_t(r') dr'

for the contrast ``x = eps_r - 1``. On pulse basis functions over square
cells of area ``da`` this becomes ``E_t = E_i + G_D Lam E_t`` and
``E_s = G_S Lam E_t`` with ``Lam = diag(lam)``,
``lam_i = -j k eps0 da x_i`` (note ``w sqrt(mu0 eps0) = k``). Hence

    G_D[i, l] = k^2 da g(|r_i - r_l|) / c,     c = -j k eps0 da,

off the diagonal, and the self term integrates ``g`` over the disc with the
cell's area (radius ``a = sqrt(da / pi)``):

    k^2 \\int_disc g = -1 - (j pi k a / 2) H1^(2)(k a),

which vanishes as the cell shrinks. ``G_S`` uses point evaluation between
receivers and cell centres. Transmitters are unit-amplitude line sources,
``E_i(r) = H0^(2)(k |r - r_tx|)``; the scale cancels in every inversion.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import special

from .tensors_io import RunConfig

MU0 = 4e-7 * math.pi
KH_WARN = 0.7
KH_MAX = 1.5


class SingularSystemError(RuntimeError):
    """The discretised Lippmann-Schwinger system cannot be solved."""


class DiscretisationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScatteringScene:
    m: int
    side: float
    frequency_hz: float
    epsilon0: float
    pixel_xy: np.ndarray  # I x 2, metres, row-major from the top-left pixel
    tx_xy: np.ndarray  # N_inc x 2
    rx_xy: np.ndarray  # N_rec x 2

    @property
    def n_pixels(self) -> int:
        return self.m * self.m

    @property
    def n_inc(self) -> int:
        return self.tx_xy.shape[0]

    @property
    def n_rec(self) -> int:
        return self.rx_xy.shape[0]

    @property
    def cell(self) -> float:
        return self.side / self.m

    @property
    def cell_area(self) -> float:
        return self.cell**2

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency_hz

    @property
    def wavenumber(self) -> float:
        """``Omega = omega sqrt(mu0 eps0)``."""
        return self.omega * math.sqrt(MU0 * self.epsilon0)

    @property
    def lambda_scale(self) -> complex:
        """Factor ``c`` with ``lam = c * x``: ``-j Omega eps0 da``."""
        return -1j * self.wavenumber * self.epsilon0 * self.cell_area

    def contrast_to_lambda(self, x) -> np.ndarray:
        return self.lambda_scale * np.asarray(x)

    def lambda_to_contrast(self, lam) -> np.ndarray:
        return np.asarray(lam) / self.lambda_scale


def _ring(n: int, radius: float) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(n) / n
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


def build_scene(config: RunConfig) -> ScatteringScene:
    """Grid, antennas and constants from a run config.

    Antennas sit on circles, equally spaced, starting at angle 0 and going
    counter-clockwise. Raises ``ValueError`` if an antenna lies inside the
    imaging square or the grid is far too coarse for the wavelength.
    """
    m, side = config.grid_pixels_per_side, config.grid_side_m
    h = side / m
    centres = -side / 2 + (np.arange(m) + 0.5) * h
    xx, yy = np.meshgrid(centres, centres[::-1])  # row 0 is the top (largest y)
    scene = ScatteringScene(
        m=m,
        side=side,
        frequency_hz=config.frequency_hz,
        epsilon0=config.epsilon0,
        pixel_xy=np.column_stack([xx.ravel(), yy.ravel()]),
        tx_xy=_ring(config.n_inc, config.tx_radius_m),
        rx_xy=_ring(config.n_rec, config.rx_radius_m),
    )
    for name, pts in (("transmitter", scene.tx_xy), ("receiver", scene.rx_xy)):
        inside = np.all(np.abs(pts) <= side / 2, axis=1)
        if inside.any():
            raise ValueError(f"{name} {int(np.argmax(inside))} lies inside the imaging domain")
    kh = scene.wavenumber * h
    if kh > KH_MAX:
        raise ValueError(f"grid too coarse: k*h = {kh:.3f} > {KH_MAX}")
    if kh > KH_WARN:
        warnings.warn(f"coarse grid: k*h = {kh:.3f} (fewer than ~9 cells per wavelength)",
                      DiscretisationWarning, stacklevel=2)
    return scene


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def self_term(k: float, cell_area: float) -> complex:
    """``k^2`` times the integral of ``g`` over a disc of area ``cell_area``."""
    a = math.sqrt(cell_area / math.pi)
    return -1.0 - 0.5j * math.pi * k * a * special.hankel2(1, k * a)


@dataclass(frozen=True)
class GreensOperators:
    g_domain: np.ndarray  # I x I, G_D
    g_measure: np.ndarray  # N_rec x I, G_S
    lambda_scale: complex

    def domain_kernel(self) -> np.ndarray:
        """``G_D * c``: maps ``diag(x) E`` to scattered domain field."""
        return self.g_domain * self.lambda_scale

    def measure_kernel(self) -> np.ndarray:
        return self.g_measure * self.lambda_scale


def build_greens(scene: ScatteringScene) -> GreensOperators:
    k, da, c = scene.wavenumber, scene.cell_area, scene.lambda_scale
    rho = _distances(scene.pixel_xy, scene.pixel_xy)
    np.fill_diagonal(rho, 1.0)  # placeholder, overwritten below
    kd = (-0.25j * k * k * da) * special.hankel2(0, k * rho)
    np.fill_diagonal(kd, self_term(k, da))
    kd = 0.5 * (kd + kd.T)  # exact symmetry; rho is symmetric up to rounding
    ks = (-0.25j * k * k * da) * special.hankel2(0, k * _distances(scene.rx_xy, scene.pixel_xy))
    return GreensOperators(kd / c, ks / c, c)


def incident_fields(scene: ScatteringScene) -> np.ndarray:
    """``I x N_inc`` incident field of unit line sources at the transmitters."""
    return special.hankel2(0, scene.wavenumber * _distances(scene.pixel_xy, scene.tx_xy))


def lambda_diagonal(scene: ScatteringScene, contrast) -> np.ndarray:
    x = np.asarray(contrast, dtype=float).ravel()
    if x.shape[0] != scene.n_pixels:
        raise ValueError(f"contrast has {x.shape[0]} pixels, scene has {scene.n_pixels}")
    return scene.contrast_to_lambda(x)


def forward_solve(scene, greens: GreensOperators, contrast, e_inc=None, residual_tol=1e-10):
    """Solve ``(I - G_D Lam) E_t = E_i`` and return ``(E_t, E_s)``.

    One dense LU factorisation (partial pivoting) serves every incidence.
    The relative residual is checked against ``residual_tol``.
    """
    lam = lambda_diagonal(scene, contrast)
    if e_inc is None:
        e_inc = incident_fields(scene)
    if not lam.any():
        return e_inc.copy(), np.zeros((scene.n_rec, e_inc.shape[1]), dtype=complex)
    a = np.eye(scene.n_pixels, dtype=complex) - greens.g_domain * lam[None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu = scipy.linalg.lu_factor(a, check_finite=False)
            e_tot = scipy.linalg.lu_solve(lu, e_inc, check_finite=False)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            cond = np.linalg.cond(a, 1)
            raise SingularSystemError(f"singular forward system (cond_1 ~ {cond:.3e})") from exc
    res = np.linalg.norm(a @ e_tot - e_inc) / np.linalg.norm(e_inc)
    if not np.isfinite(res) or res >= residual_tol:
        cond = np.linalg.cond(a, 1)
        raise SingularSystemError(f"forward residual {res:.3e} (cond_1 ~ {cond:.3e})")
    e_sca = greens.g_measure @ (lam[:, None] * e_tot)
    return e_tot, e_sca


def born_scattered(scene, greens: GreensOperators, contrast, e_inc=None) -> np.ndarray:
    """First-order Born field ``G_S Lam E_i`` at the receivers."""
    lam = lambda_diagonal(scene, contrast)
    if e_inc is None:
        e_inc = incident_fields(scene)
    return greens.g_measure @ (lam[:, None] * e_inc)


def add_noise(e_sca: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise at the given SNR (relative to mean power)."""
    power = np.mean(np.abs(e_sca) ** 2)
    sigma = math.sqrt(power / 10 ** (snr_db / 10) / 2)
    noise = rng.standard_normal(e_sca.shape) + 1j * rng.standard_normal(e_sca.shape)
    return e_sca + sigma * noise
