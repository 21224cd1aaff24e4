"""Reference PDE solvers used to synthesize operator datasets.

Two families:

* steady Darcy flow ``-div(a grad u) = f`` on the unit square with zero
  Dirichlet boundary, discretized with the 5-point stencil on the interior
  nodes and solved with conjugate gradients;
* 2D incompressible Navier-Stokes in vorticity form on the periodic box
  ``[0, 2pi)^2``, pseudo-spectral in space with 2/3-rule dealiasing and
  Heun (RK2) time stepping.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import gaussian_filter
from scipy.sparse.linalg import cg

from .errors import GenerationError

__all__ = [
    "assemble_darcy",
    "solve_darcy",
    "darcy_residual",
    "threshold_permeability",
    "gaussian_random_field",
    "NavierStokes2D",
]


# --------------------------------------------------------------------------
# Darcy
# --------------------------------------------------------------------------

def _harmonic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 2.0 * x * y / (x + y)


def assemble_darcy(a: np.ndarray) -> sp.csr_matrix:
    """Assemble the SPD 5-point matrix for ``-div(a grad u)`` on interior nodes.

    ``a`` holds nodal coefficients on an ``H x W`` interior grid with spacing
    ``1/(H+1)`` (rows) and ``1/(W+1)`` (columns). Face coefficients are the
    harmonic mean of the two adjacent nodes; faces touching the boundary use
    the interior node's own value.
    """
    a = np.asarray(a, dtype=np.float64)
    H, W = a.shape
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise GenerationError("permeability must be finite and strictly positive")
    hy2 = (1.0 / (H + 1)) ** 2
    hx2 = (1.0 / (W + 1)) ** 2
    idx = np.arange(H * W).reshape(H, W)

    # coefficients on the faces to the north/south/west/east of each node
    cn = np.empty_like(a)
    cs = np.empty_like(a)
    cw = np.empty_like(a)
    ce = np.empty_like(a)
    cn[1:, :] = _harmonic(a[1:, :], a[:-1, :])
    cn[0, :] = a[0, :]
    cs[:-1, :] = _harmonic(a[:-1, :], a[1:, :])
    cs[-1, :] = a[-1, :]
    cw[:, 1:] = _harmonic(a[:, 1:], a[:, :-1])
    cw[:, 0] = a[:, 0]
    ce[:, :-1] = _harmonic(a[:, :-1], a[:, 1:])
    ce[:, -1] = a[:, -1]

    diag = (cn + cs) / hy2 + (cw + ce) / hx2
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    # off-diagonals (interior couplings only; boundary values are zero)
    rows += [idx[1:, :].ravel(), idx[:-1, :].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    cols += [idx[:-1, :].ravel(), idx[1:, :].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    vals += [
        -cn[1:, :].ravel() / hy2,
        -cs[:-1, :].ravel() / hy2,
        -cw[:, 1:].ravel() / hx2,
        -ce[:, :-1].ravel() / hx2,
    ]
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(H * W, H * W),
    )
    return A.tocsr()


def solve_darcy(a: np.ndarray, forcing: float = 1.0, rtol: float = 1e-10) -> np.ndarray:
    """Solve the discrete Darcy problem for one coefficient field (float64)."""
    a = np.asarray(a, dtype=np.float64)
    A = assemble_darcy(a)
    f = np.full(a.size, float(forcing))
    u, info = cg(A, f, rtol=rtol, atol=0.0, maxiter=20 * a.size)
    if info != 0 or not np.all(np.isfinite(u)):
        raise GenerationError(f"conjugate gradient did not converge (info={info})")
    return u.reshape(a.shape)


def darcy_residual(a: np.ndarray, u: np.ndarray, forcing: float = 1.0) -> float:
    """Max-norm residual ``||A_h u - f||_inf`` of the assembled system."""
    A = assemble_darcy(a)
    r = A @ np.asarray(u, dtype=np.float64).ravel() - forcing
    return float(np.max(np.abs(r)))


def threshold_permeability(
    rng: np.random.Generator, shape: tuple[int, int], beta: float, smoothing: float | None = None
) -> np.ndarray:
    """Two-valued field ``{1, beta}`` from thresholding smoothed noise at its median."""
    H, W = shape
    sigma = smoothing if smoothing is not None else max(H, W) / 8.0
    noise = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return np.where(noise > np.median(noise), float(beta), 1.0)


# --------------------------------------------------------------------------
# Navier-Stokes (vorticity form)
# --------------------------------------------------------------------------

def gaussian_random_field(
    rng: np.random.Generator, shape: tuple[int, int], alpha: float = 2.5, tau: float = 3.0
) -> np.ndarray:
    """Zero-mean, unit-std periodic field with spectrum ``(|k|^2 + tau^2)^(-alpha/2)``."""
    H, W = shape
    ky = np.fft.fftfreq(H, d=1.0 / H)[:, None]
    kx = np.fft.fftfreq(W, d=1.0 / W)[None, :]
    amp = (kx**2 + ky**2 + tau**2) ** (-alpha / 2.0)
    amp[0, 0] = 0.0
    field = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal(shape)) * amp))
    std = field.std()
    return field / std if std > 0 else field


class NavierStokes2D:
    """Pseudo-spectral vorticity solver on ``[0, 2pi)^2``.

    ``dw/dt + (v . grad) w = nu * lap(w)``, with the velocity recovered from
    the stream function ``lap(psi) = -w``, ``v = (d psi/dy, -d psi/dx)``,
    which is divergence-free by construction.
    """

    def __init__(self, shape: tuple[int, int], viscosity: float = 1e-3, dt: float = 1e-2,
                 cfl_max: float = 1.0):
        if viscosity <= 0:
            raise GenerationError("viscosity must be positive")
        if dt <= 0:
            raise GenerationError("time step must be positive")
        H, W = shape
        self.shape = (H, W)
        self.viscosity = float(viscosity)
        self.dt = float(dt)
        self.cfl_max = float(cfl_max)
        self.dx = 2 * np.pi / W
        self.dy = 2 * np.pi / H
        self.ky = np.fft.fftfreq(H, d=1.0 / H)[:, None] * np.ones((1, W))
        self.kx = np.fft.fftfreq(W, d=1.0 / W)[None, :] * np.ones((H, 1))
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.zeros_like(self.k2)
        self.inv_k2[self.k2 > 0] = 1.0 / self.k2[self.k2 > 0]
        kmax_x = np.abs(self.kx).max()
        kmax_y = np.abs(self.ky).max()
        self.dealias = (np.abs(self.kx) < (2.0 / 3.0) * kmax_x + 1e-12) & (
            np.abs(self.ky) < (2.0 / 3.0) * kmax_y + 1e-12
        )

    def velocity(self, w_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        psi_hat = w_hat * self.inv_k2
        vx = np.real(np.fft.ifft2(1j * self.ky * psi_hat))
        vy = np.real(np.fft.ifft2(-1j * self.kx * psi_hat))
        return vx, vy

    def _rhs(self, w_hat: np.ndarray) -> np.ndarray:
        vx, vy = self.velocity(w_hat)
        wx = np.real(np.fft.ifft2(1j * self.kx * w_hat))
        wy = np.real(np.fft.ifft2(1j * self.ky * w_hat))
        adv_hat = np.fft.fft2(vx * wx + vy * wy) * self.dealias
        # div(v w) has zero mean analytically; drop the aliasing residue
        adv_hat[0, 0] = 0.0
        return -adv_hat - self.viscosity * self.k2 * w_hat

    def cfl(self, w_hat: np.ndarray, dt: float | None = None) -> float:
        vx, vy = self.velocity(w_hat)
        return (self.dt if dt is None else dt) * (np.abs(vx).max() / self.dx + np.abs(vy).max() / self.dy)

    def energy(self, w: np.ndarray) -> float:
        vx, vy = self.velocity(np.fft.fft2(w))
        return float(0.5 * np.mean(vx**2 + vy**2))

    def step(self, w_hat: np.ndarray, dt: float | None = None) -> np.ndarray:
        dt = self.dt if dt is None else dt
        c = self.cfl(w_hat, dt)
        if c > self.cfl_max:
            raise GenerationError(
                f"CFL number {c:.3g} exceeds {self.cfl_max}; reduce the time step for this grid"
            )
        k1 = self._rhs(w_hat)
        k2 = self._rhs(w_hat + dt * k1)
        return w_hat + 0.5 * dt * (k1 + k2)

    def run(self, w0: np.ndarray, n_steps: int, dt: float | None = None) -> np.ndarray:
        w_hat = np.fft.fft2(np.asarray(w0, dtype=np.float64))
        for _ in range(n_steps):
            w_hat = self.step(w_hat, dt)
        return np.real(np.fft.ifft2(w_hat))

    def solve(self, w0: np.ndarray, t_final: float) -> np.ndarray:
        if t_final <= 0:
            raise GenerationError("T_final must be positive")
        n_steps = max(1, math.ceil(t_final / self.dt - 1e-9))
        return self.run(w0, n_steps, t_final / n_steps)
