"""
Deformation Stack for the CMSR super-resolution engine
Learnable coarse-to-fine alignment of the RGB guide: affine, then CPAB,
then thin-plate spline, composed into one sampling grid.

Grids are tensors of shape (1, 2, H, W) holding normalized (x, y)
pixel-center coordinates in [-1, 1]. Warps map output positions to the
guide positions they read from, so composing warps means feeding one
warp's output grid into the next.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve, null_space

from errors import ShapeError, TessellationError
from image_io import ImageBuffer
from tensor_autodiff import (DEFAULT_DTYPE, Function, ParamGroup, Tensor,
                             grid_sample_bilinear, no_grad, parameter,
                             resize_bicubic)

logger = logging.getLogger(__name__)


class DeformationStage(Enum):
    """Which layers the coarse-to-fine schedule currently admits."""
    AFFINE = "affine"
    AFFINE_CPAB = "affine+cpab"
    FULL = "full"


STAGE_LAYERS: Dict[DeformationStage, Tuple[str, ...]] = {
    DeformationStage.AFFINE: ("affine",),
    DeformationStage.AFFINE_CPAB: ("affine", "cpab"),
    DeformationStage.FULL: ("affine", "cpab", "tps"),
}

# Composition order is part of the contract
LAYER_ORDER = ("affine", "cpab", "tps")


@dataclass
class LayerFlags:
    """Per-layer enable switches (used by ablations)."""
    affine: bool = True
    cpab: bool = True
    tps: bool = True

    def enabled(self) -> Tuple[str, ...]:
        return tuple(name for name in LAYER_ORDER if getattr(self, name))


# ==================== Identity Grid ====================

def identity_grid(h: int, w: int, dtype=None) -> Tensor:
    """Pixel-center lattice: coordinate (2i + 1) / n - 1 along each axis."""
    if h < 1 or w < 1:
        raise ShapeError(f"grid size must be positive, got {h}x{w}")
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return Tensor(np.stack([gx, gy])[None], dtype=dtype)


def _grid_points(grid: np.ndarray) -> np.ndarray:
    """(1, 2, H, W) grid to (N, 2) points."""
    return grid[0].reshape(2, -1).T


def _points_grid(points: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    return points.T.reshape(shape)


# ==================== Affine ====================

@dataclass
class AffineParams:
    """2x3 matrix [a b tx; c d ty] acting on normalized coordinates."""
    matrix: Tensor

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(parameter([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


class _AffineGrid(Function):
    def forward(self, matrix, grid):
        self.matrix = matrix
        self.grid = grid
        x, y = grid[0, 0], grid[0, 1]
        out_x = matrix[0, 0] * x + matrix[0, 1] * y + matrix[0, 2]
        out_y = matrix[1, 0] * x + matrix[1, 1] * y + matrix[1, 2]
        return np.stack([out_x, out_y])[None]

    def backward(self, grad):
        x, y = self.grid[0, 0], self.grid[0, 1]
        gx, gy = grad[0, 0], grad[0, 1]
        grad_matrix = np.array([
            [(gx * x).sum(), (gx * y).sum(), gx.sum()],
            [(gy * x).sum(), (gy * y).sum(), gy.sum()],
        ], dtype=grad.dtype)
        m = self.matrix
        grad_grid = np.stack([m[0, 0] * gx + m[1, 0] * gy,
                              m[0, 1] * gx + m[1, 1] * gy])[None]
        return grad_matrix, grad_grid.astype(grad.dtype)


def affine_warp_grid(p: AffineParams, grid: Tensor) -> Tensor:
    return _AffineGrid.apply(p.matrix, grid)


# ==================== CPAB ====================

@dataclass(frozen=True)
class Tessellation:
    """
    nx x ny rectangular cells over [-1, 1]^2, each split into 4 triangles
    meeting at the cell center.

    Triangle t of a cell is bounded by the center and one cell edge:
    0 = low-y edge, 1 = high-x edge, 2 = high-y edge, 3 = low-x edge.
    """
    nx: int = 4
    ny: int = 4

    @property
    def n_triangles(self) -> int:
        return 4 * self.nx * self.ny

    def cell_bounds(self, ix: int, iy: int) -> Tuple[float, float, float, float]:
        x0 = -1.0 + 2.0 * ix / self.nx
        y0 = -1.0 + 2.0 * iy / self.ny
        return x0, x0 + 2.0 / self.nx, y0, y0 + 2.0 / self.ny

    def triangle_index(self, ix: int, iy: int, t: int) -> int:
        return (iy * self.nx + ix) * 4 + t

    def triangle_vertices(self, ix: int, iy: int, t: int) -> np.ndarray:
        x0, x1, y0, y1 = self.cell_bounds(ix, iy)
        center = ((x0 + x1) / 2, (y0 + y1) / 2)
        edge = {
            0: ((x0, y0), (x1, y0)),
            1: ((x1, y0), (x1, y1)),
            2: ((x1, y1), (x0, y1)),
            3: ((x0, y1), (x0, y0)),
        }[t]
        return np.array([center, edge[0], edge[1]])

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Triangle index containing each (x, y) point; outside points use the nearest cell."""
        x, y = points[:, 0], points[:, 1]
        ix = np.clip(np.floor((x + 1.0) * self.nx / 2.0), 0, self.nx - 1).astype(np.intp)
        iy = np.clip(np.floor((y + 1.0) * self.ny / 2.0), 0, self.ny - 1).astype(np.intp)
        u = (x - (-1.0 + (2.0 * ix + 1.0) / self.nx)) * self.nx
        v = (y - (-1.0 + (2.0 * iy + 1.0) / self.ny)) * self.ny
        t = np.where(v <= -np.abs(u), 0,
                     np.where(u >= np.abs(v), 1,
                              np.where(v >= np.abs(u), 2, 3)))
        return (iy * self.nx + ix) * 4 + t

    def shared_edges(self) -> List[Tuple[int, int, np.ndarray]]:
        """(triangle_a, triangle_b, 2x2 endpoint array) for every internal edge."""
        edges = []
        for iy in range(self.ny):
            for ix in range(self.nx):
                x0, x1, y0, y1 = self.cell_bounds(ix, iy)
                center = ((x0 + x1) / 2, (y0 + y1) / 2)
                own = [self.triangle_index(ix, iy, t) for t in range(4)]
                for a, b, corner in ((0, 1, (x1, y0)), (1, 2, (x1, y1)),
                                     (2, 3, (x0, y1)), (3, 0, (x0, y0))):
                    edges.append((own[a], own[b], np.array([center, corner])))
                if ix + 1 < self.nx:
                    edges.append((own[1], self.triangle_index(ix + 1, iy, 3),
                                  np.array([(x1, y0), (x1, y1)])))
                if iy + 1 < self.ny:
                    edges.append((own[2], self.triangle_index(ix, iy + 1, 0),
                                  np.array([(x0, y1), (x1, y1)])))
        return edges


def continuity_constraints(tess: Tessellation) -> np.ndarray:
    """Rows enforce equal velocity from both triangles at each shared-edge vertex."""
    rows = []
    n_unknowns = 6 * tess.n_triangles
    for tri_a, tri_b, endpoints in tess.shared_edges():
        for vx, vy in endpoints:
            for comp in range(2):
                row = np.zeros(n_unknowns)
                row[6 * tri_a + 3 * comp: 6 * tri_a + 3 * comp + 3] = (vx, vy, 1.0)
                row[6 * tri_b + 3 * comp: 6 * tri_b + 3 * comp + 3] = (-vx, -vy, -1.0)
                rows.append(row)
    return np.array(rows)


@lru_cache(maxsize=16)
def _cached_basis(nx: int, ny: int) -> np.ndarray:
    basis = null_space(continuity_constraints(Tessellation(nx, ny)))
    basis.setflags(write=False)
    return basis


def cpab_basis(tess: Tessellation) -> np.ndarray:
    """Orthonormal basis (6T x D) of continuous piecewise-affine velocity fields."""
    if tess.nx < 1 or tess.ny < 1:
        raise TessellationError(f"tessellation needs at least one cell per axis, got {tess.nx}x{tess.ny}")
    basis = _cached_basis(tess.nx, tess.ny)
    if basis.shape[1] == 0:
        raise TessellationError(f"tessellation {tess.nx}x{tess.ny} admits no continuous field")
    return basis


@dataclass
class CpabField:
    """CPA velocity field coefficients plus the integration settings."""
    tessellation: Tessellation
    coefficients: Tensor
    basis: np.ndarray
    n_steps: int = 32

    @classmethod
    def zeros(cls, tessellation: Tessellation = Tessellation(), n_steps: int = 32) -> "CpabField":
        basis = cpab_basis(tessellation)
        return cls(tessellation, parameter(np.zeros(basis.shape[1])), basis, n_steps)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def velocity_matrices(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-triangle 2x3 velocity matrices for the given (or current) coefficients."""
        theta = self.coefficients.data if theta is None else theta
        return (self.basis @ np.asarray(theta, dtype=np.float64)).reshape(-1, 2, 3)

    def velocity(self, points: np.ndarray, triangles: Optional[np.ndarray] = None) -> np.ndarray:
        """Velocity at (N, 2) points, optionally forcing the triangle used per point."""
        mats = self.velocity_matrices()
        tri = self.tessellation.locate(points) if triangles is None else triangles
        a = mats[tri]
        return np.einsum("nij,nj->ni", a[:, :, :2], points) + a[:, :, 2]


class _CpabIntegrate(Function):
    """Fixed-step Euler advection; the backward pass runs the adjoint through every step."""

    def forward(self, theta, grid, velocity_field: CpabField):
        self.basis = velocity_field.basis
        self.tess = velocity_field.tessellation
        self.h = 1.0 / velocity_field.n_steps
        self.grid_shape = grid.shape
        self.mats = (velocity_field.basis @ theta.astype(np.float64)).reshape(-1, 2, 3)
        points = _grid_points(grid).astype(np.float64)
        self.trajectory = []
        for _ in range(velocity_field.n_steps):
            tri = self.tess.locate(points)
            a = self.mats[tri]
            self.trajectory.append((points, tri))
            velocity = np.einsum("nij,nj->ni", a[:, :, :2], points) + a[:, :, 2]
            points = points + self.h * velocity
        return _points_grid(points, grid.shape).astype(grid.dtype)

    def backward(self, grad):
        adjoint = _grid_points(grad).astype(np.float64)
        n_tri = self.mats.shape[0]
        grad_mats = np.zeros((n_tri, 2, 3))
        for points, tri in reversed(self.trajectory):
            homogeneous = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)
            for i in range(2):
                for j in range(3):
                    grad_mats[:, i, j] += self.h * np.bincount(
                        tri, weights=adjoint[:, i] * homogeneous[:, j], minlength=n_tri)
            a = self.mats[tri]
            adjoint = adjoint + self.h * np.einsum("nij,ni->nj", a[:, :, :2], adjoint)
        grad_theta = self.basis.T @ grad_mats.reshape(-1)
        grad_grid = _points_grid(adjoint, self.grid_shape)
        return grad_theta.astype(grad.dtype), grad_grid.astype(grad.dtype)


def cpab_warp_grid(f: CpabField, grid: Tensor) -> Tensor:
    """Advect every grid point along the CPA velocity field for unit time."""
    return _CpabIntegrate.apply(f.coefficients, grid, velocity_field=f)


# ==================== Thin-Plate Spline ====================

def tps_radial(r2: np.ndarray) -> np.ndarray:
    """U = r^2 log r^2, with U(0) = 0."""
    safe = np.where(r2 > 0, r2, 1.0)
    return np.where(r2 > 0, r2 * np.log(safe), 0.0)


def _squared_distances(points: np.ndarray, controls: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - controls[None, :, :]
    return (diff ** 2).sum(axis=-1)


@dataclass
class TpsParams:
    """Displacements of a k x k control lattice and the solved TPS system."""
    k: int
    displacements: Tensor
    lam: float = 0.0
    control_points: np.ndarray = field(init=False, repr=False)
    system: Tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise TessellationError(f"TPS regularization must be non-negative, got {self.lam}")
        axis = np.linspace(-1.0, 1.0, self.k)
        gx, gy = np.meshgrid(axis, axis)
        self.control_points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.system = self._factor_system()

    @classmethod
    def zeros(cls, k: int = 5, lam: float = 0.0) -> "TpsParams":
        if k < 2:
            raise TessellationError(f"TPS lattice needs k >= 2, got {k}")
        return cls(k, parameter(np.zeros((k * k, 2))), lam)

    @property
    def n_controls(self) -> int:
        return self.k * self.k

    def _factor_system(self):
        n = self.n_controls
        c = self.control_points
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = tps_radial(_squared_distances(c, c)) + self.lam * np.eye(n)
        system[:n, n] = 1.0
        system[:n, n + 1:] = c
        system[n, :n] = 1.0
        system[n + 1:, :n] = c.T
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                lu, piv = lu_factor(system)
            except (LinAlgWarning, ValueError, np.linalg.LinAlgError) as exc:
                raise TessellationError(f"singular TPS system: {exc}") from exc
        if np.min(np.abs(np.diag(lu))) < 1e-12:
            raise TessellationError("singular TPS system: control points are not distinct")
        return lu, piv

    def design_matrix(self, points: np.ndarray) -> np.ndarray:
        """[U(|p - c_k|^2) ..., 1, x, y] for each point."""
        radial = tps_radial(_squared_distances(points, self.control_points))
        return np.concatenate([radial, np.ones((points.shape[0], 1)), points], axis=1)

    def coefficients(self, displacements: Optional[np.ndarray] = None) -> np.ndarray:
        d = self.displacements.data if displacements is None else displacements
        rhs = np.zeros((self.n_controls + 3, 2))
        rhs[:self.n_controls] = d
        return lu_solve(self.system, rhs)


class _TpsGrid(Function):
    def forward(self, displacements, grid, params: TpsParams):
        self.params = params
        self.grid_shape = grid.shape
        self.points = _grid_points(grid).astype(np.float64)
        self.design = params.design_matrix(self.points)
        self.coeff = params.coefficients(displacements.astype(np.float64))
        moved = self.points + self.design @ self.coeff
        return _points_grid(moved, grid.shape).astype(grid.dtype)

    def backward(self, grad):
        n = self.params.n_controls
        g = _grid_points(grad).astype(np.float64)
        grad_rhs = lu_solve(self.params.system, self.design.T @ g, trans=1)
        grad_disp = grad_rhs[:n]

        # d/dp of r^2 log r^2 is 2 (p - c)(log r^2 + 1)
        diff = self.points[:, None, :] - self.params.control_points[None, :, :]
        r2 = (diff ** 2).sum(axis=-1)
        slope = np.where(r2 > 0, np.log(np.where(r2 > 0, r2, 1.0)) + 1.0, 0.0)
        weight = (g @ self.coeff[:n].T) * slope
        grad_points = g + 2.0 * np.einsum("nk,nkj->nj", weight, diff)
        grad_points += g @ self.coeff[n + 1:].T
        return grad_disp.astype(grad.dtype), _points_grid(grad_points, self.grid_shape).astype(grad.dtype)


def tps_warp_grid(t: TpsParams, grid: Tensor) -> Tensor:
    """Displace grid points by the TPS surface through the control displacements."""
    return _TpsGrid.apply(t.displacements, grid, params=t)


# ==================== Deformation Stack ====================

@dataclass
class DeformationStack:
    """Affine, CPAB and TPS layers plus the enable flags and staging phase."""
    affine: AffineParams
    cpab: CpabField
    tps: TpsParams
    enabled: LayerFlags = field(default_factory=LayerFlags)
    stage: DeformationStage = DeformationStage.FULL

    @classmethod
    def create(cls, cells: Tuple[int, int] = (4, 4), n_steps: int = 32,
               tps_k: int = 5, tps_lambda: float = 0.0,
               enabled: Optional[LayerFlags] = None) -> "DeformationStack":
        return cls(
            affine=AffineParams.identity(),
            cpab=CpabField.zeros(Tessellation(*cells), n_steps),
            tps=TpsParams.zeros(tps_k, tps_lambda),
            enabled=enabled or LayerFlags(),
        )

    def active_layers(self) -> Tuple[str, ...]:
        admitted = STAGE_LAYERS[self.stage]
        return tuple(name for name in self.enabled.enabled() if name in admitted)

    def layer_parameters(self) -> Dict[str, Tensor]:
        return {
            "affine": self.affine.matrix,
            "cpab": self.cpab.coefficients,
            "tps": self.tps.displacements,
        }

    def param_groups(self, lr_factors: Dict[str, float]) -> List[ParamGroup]:
        """Optimizer groups for the currently active layers only."""
        params = self.layer_parameters()
        return [ParamGroup(name, [params[name]], lr_factors.get(name, 1.0))
                for name in self.active_layers()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.layer_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.layer_parameters().items():
            if name in state:
                value = np.asarray(state[name], dtype=tensor.dtype)
                if value.shape != tensor.shape:
                    raise ShapeError(f"{name}: stored shape {value.shape} != {tensor.shape}")
                tensor.data[...] = value

    def warm_start_affine(self, previous: "DeformationStack") -> None:
        self.affine.matrix.data[...] = previous.affine.matrix.data


def deformation_grid(stack: DeformationStack, h: int, w: int) -> Tensor:
    """tps(cpab(affine(identity))) restricted to the active layers."""
    grid = identity_grid(h, w, dtype=stack.affine.matrix.dtype)
    active = stack.active_layers()
    if "affine" in active:
        grid = affine_warp_grid(stack.affine, grid)
    if "cpab" in active:
        grid = cpab_warp_grid(stack.cpab, grid)
    if "tps" in active:
        grid = tps_warp_grid(stack.tps, grid)
    return grid


def apply_deformation(stack: DeformationStack, rgb: Tensor) -> Tensor:
    """Warp the guide with a single resampling through the composed grid."""
    grid = deformation_grid(stack, rgb.shape[2], rgb.shape[3])
    return grid_sample_bilinear(rgb, grid)


def overlay_rg(warped_rgb: Tensor, modality: Tensor) -> ImageBuffer:
    """Red from the guide, green from the modality (upsampled to the guide size)."""
    h, w = warped_rgb.shape[2:]
    with no_grad():
        if modality.shape[2:] != (h, w):
            modality = resize_bicubic(modality, h, w)
    red = warped_rgb.data[0, 0]
    green = modality.data[0, 0]
    rgb = np.stack([red, green, np.zeros_like(red)], axis=-1)
    return ImageBuffer(np.clip(rgb, 0.0, 1.0).astype(DEFAULT_DTYPE))
