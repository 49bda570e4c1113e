"""Coarse localization: noisy bounding-box centre -> deprojection -> peg estimate.

A Gaussian oracle replaces the object detector: the true platform centre is
projected with the pinhole model, its pixel centre and depth are perturbed,
and the result is deprojected again. The gripper then descends until a linear
spring contact model reports a vertical force above threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CameraIntrinsics, GridMap, clamp_to_map, deproject, peg_from_platform, project
from .env import ContractViolation


class ContactTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class BBoxObservation:
    center_u: float
    center_v: float
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("bbox depth must be positive")


@dataclass(frozen=True)
class NoiseModel:
    sigma_px: float = 4.0
    sigma_depth: float = 0.003

    def __post_init__(self):
        if self.sigma_px < 0 or self.sigma_depth < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class ContactParams:
    f_z_threshold: float = 2.0
    surface_z: float = 0.0
    stiffness: float = 1.0
    descent_step: float = 0.5
    max_steps: int = 1000

    def __post_init__(self):
        if not (self.f_z_threshold > 0 and self.stiffness > 0 and self.descent_step > 0):
            raise ValueError("threshold, stiffness and descent_step must be positive")


@dataclass(frozen=True)
class Stage1Config:
    camera: CameraIntrinsics = CameraIntrinsics()
    noise: NoiseModel = NoiseModel()
    contact: ContactParams = ContactParams()
    # peg position in the camera frame (m), platform centre relative to the peg (m)
    true_peg_m: tuple[float, float, float] = (0.01, -0.02, 0.5)
    platform_offset_m: tuple[float, float, float] = (0.015, 0.01, 0.0)
    start_z_mm: float = 30.0


def detect_bbox(platform_center: np.ndarray, K: CameraIntrinsics, noise: NoiseModel,
                rng: np.random.Generator) -> BBoxObservation:
    u, v, z = project(platform_center, K)
    e = rng.standard_normal(3)
    depth = z + noise.sigma_depth * e[2]
    return BBoxObservation(u + noise.sigma_px * e[0], v + noise.sigma_px * e[1], max(depth, 1e-6))


def localize_peg(true_peg: np.ndarray, K: CameraIntrinsics, noise: NoiseModel,
                 rng: np.random.Generator, platform_offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Estimated peg position (m, camera frame) from one noisy detection."""
    offset = np.asarray(platform_offset, dtype=float)
    platform = np.asarray(true_peg, dtype=float) + offset
    bbox = detect_bbox(platform, K, noise, rng)
    center = deproject(bbox.center_u, bbox.center_v, bbox.depth, K)
    return peg_from_platform(center, offset)


def descend_until_contact(start_z: float, contact: ContactParams) -> tuple[float, float, int]:
    """Step down until the spring force exceeds the threshold; returns (z, fz, steps)."""
    if start_z <= contact.surface_z:
        raise ContractViolation(f"start_z {start_z} is not above the surface at {contact.surface_z}")
    z = start_z
    for k in range(1, contact.max_steps + 1):
        z = start_z - k * contact.descent_step
        fz = contact.stiffness * max(0.0, contact.surface_z - z)
        if fz > contact.f_z_threshold:
            return z, fz, k
    raise ContactTimeout(f"no contact after {contact.max_steps} steps (z={z:.3f} mm)")


def max_descent_steps(start_z: float, contact: ContactParams) -> int:
    # the crossing is strict (fz > threshold), hence floor + 1 rather than ceil
    gap = math.ceil((start_z - contact.surface_z) / contact.descent_step)
    return gap + math.floor(contact.f_z_threshold / (contact.stiffness * contact.descent_step)) + 1


def stage2_start(true_peg_xy, estimate_xy, gmap: GridMap) -> np.ndarray:
    """Gripper start in the grid frame (mm): peg at the map target plus the stage-1 error."""
    err = np.asarray(estimate_xy, dtype=float) - np.asarray(true_peg_xy, dtype=float)
    return clamp_to_map(gmap.target_mm + err, gmap)
