"""Sliding-window arithmetic: patch grids, layer output sizes, receptive fields.

Everything here is integer math, parameterized rather than hard-coded, so the
full-resolution configuration and the desk-scale one share the same formulas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "GeometryError",
    "PatchGrid",
    "LayerGeom",
    "RFState",
    "patch_count",
    "patch_coords",
    "extract_patch",
    "output_size",
    "receptive_field",
    "max_stride_for_coverage",
]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window decomposition of an image.

    n_x = 1 + floor((image_w - window)/stride), same for n_y; every patch
    lies fully inside the image.
    """

    image_w: int
    image_h: int
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1:
            raise GeometryError(f"window must be >= 1, got {self.window}")
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.window > self.image_w or self.window > self.image_h:
            raise GeometryError(
                f"window {self.window} exceeds image {self.image_w}x{self.image_h}"
            )

    @property
    def n_x(self) -> int:
        return 1 + (self.image_w - self.window) // self.stride

    @property
    def n_y(self) -> int:
        return 1 + (self.image_h - self.window) // self.stride

    @property
    def total(self) -> int:
        return self.n_x * self.n_y

    @property
    def coverage_exact(self) -> bool:
        """False when the right/bottom border is not reached by any patch."""
        return ((self.image_w - self.window) % self.stride == 0
                and (self.image_h - self.window) % self.stride == 0)


def patch_count(image_w: int, image_h: int, window: int, stride: int) -> tuple[int, int]:
    """Patch counts per axis; floor-division semantics."""
    grid = PatchGrid(image_w, image_h, window, stride)
    return grid.n_x, grid.n_y


def patch_coords(grid: PatchGrid) -> list[tuple[int, int]]:
    """(x, y) offsets in row-major order: y outer, x inner."""
    return [(i * grid.stride, j * grid.stride)
            for j in range(grid.n_y) for i in range(grid.n_x)]


def extract_patch(image: Tensor, x: int, y: int, window: int) -> Tensor:
    """Exact (C, window, window) crop at offset (x, y)."""
    if image.ndim != 3:
        raise GeometryError(f"extract_patch expects (C, H, W), got {image.shape}")
    _, h, w = image.shape
    if x < 0 or y < 0 or x + window > w or y + window > h:
        raise GeometryError(
            f"patch ({x}, {y}) size {window} out of bounds for image {w}x{h}"
        )
    return Tensor(np.ascontiguousarray(image.data[:, y:y + window, x:x + window]))


@dataclass(frozen=True)
class LayerGeom:
    """Kernel/stride/padding of one layer, as geometry sees it."""

    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1:
            raise GeometryError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride < 1 or self.padding < 0:
            raise GeometryError(
                f"stride must be >= 1 and padding >= 0, got {self.stride}, {self.padding}"
            )


@dataclass(frozen=True)
class RFState:
    """Receptive field r and jump j, both in input pixels; identity is (1, 1)."""

    r: int = 1
    jump: int = 1


def output_size(layers: Sequence[LayerGeom], size: int) -> list[int]:
    """Spatial size after each layer: n' = floor((n + 2*pad - kernel)/stride) + 1."""
    sizes = []
    n = size
    for i, layer in enumerate(layers):
        n = (n + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if n < 1:
            raise GeometryError(
                f"layer {i} ({layer.kernel}x{layer.kernel} s{layer.stride} "
                f"p{layer.padding}) collapses the map to size {n}"
            )
        sizes.append(n)
    return sizes


def receptive_field(layers: Sequence[LayerGeom]) -> RFState:
    """Fold r <- r + (kernel-1)*j then j <- j*stride over the stack.

    Padding shifts alignment only; it does not change r or j.
    """
    r, j = 1, 1
    for layer in layers:
        r += (layer.kernel - 1) * j
        j *= layer.stride
    return RFState(r=r, jump=j)


def max_stride_for_coverage(rf: RFState) -> int:
    """Largest patch-extraction stride whose receptive fields still tile the
    input with no uncovered pixel."""
    return rf.r
