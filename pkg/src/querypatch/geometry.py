"""Patch placement: affine warps, masked composition, pose sampling.

A patch is a square pixel block plus a binary ownership mask.  Placing it
on an image means warping both through the same rotation/scale/translation
and then selecting, per output pixel, either the warped patch value
(mask 1) or the untouched image value (mask 0).  Because the two mask
regions partition the canvas, the select form is equivalent to summing the
two masked warped terms while avoiding blended seams at the boundary and
keeping every output pixel inside [0, 1].

Patch pixels are resampled bilinearly; the mask is resampled with the same
map and re-binarized at 0.5.  Source coordinates that land within 1e-7 of
a grid point are snapped to it, so axis-aligned poses (identity, quarter
turns) reproduce pixels exactly instead of picking up float noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_png, write_png
from .errors import GeometryError
from .rng import Rng

_SNAP_EPS = 1e-7
_EDGE_EPS = 1e-6


@dataclass
class Patch:
    """Square pixel block with a {0,1} ownership mask."""

    pixels: np.ndarray  # (side, side, C) float in [0,1]
    mask: np.ndarray    # (side, side) float in {0.0, 1.0}

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"patch pixels must be (side, side, C), got {self.pixels.shape}")
        if self.pixels.shape[2] not in (1, 3):
            raise ValueError(f"patch channels must be 1 or 3, got {self.pixels.shape[2]}")
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} != patch shape {self.pixels.shape[:2]}"
            )
        if self.pixels.min(initial=0.0) < 0.0 or self.pixels.max(initial=0.0) > 1.0:
            raise ValueError("patch pixels outside [0,1]")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class AffineTransform:
    """One pose: rotation (radians), isotropic scale, patch-center location.

    ``loc`` is (row, col) of the patch center in image coordinates; pixel
    centers sit at integer coordinates.
    """

    rotation: float
    scale: float
    loc: tuple[float, float]

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class TransformConfig:
    """Pose distribution: rotation/scale ranges plus a location policy.

    ``location=None`` places the patch uniformly anywhere it fully fits;
    a (row, col) tuple pins it.
    """

    theta_max: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    location: tuple[float, float] | None = None

    def __post_init__(self):
        if not (0.0 <= self.theta_max <= math.pi):
            raise ValueError(f"theta_max must lie in [0, pi], got {self.theta_max}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"need 0 < s_min <= s_max, got {self.scale_range}")

    def to_dict(self) -> dict:
        return {
            "theta_max": self.theta_max,
            "scale_range": list(self.scale_range),
            "location": list(self.location) if self.location is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformConfig":
        loc = d.get("location")
        return cls(
            theta_max=float(d.get("theta_max", 0.0)),
            scale_range=tuple(d.get("scale_range", (1.0, 1.0))),
            location=tuple(loc) if loc is not None else None,
        )


def make_mask(side: int, kind: str = "square") -> np.ndarray:
    """All-ones square mask, or an inscribed disc for kind='circle'."""
    if kind == "square":
        return np.ones((side, side), dtype=np.float64)
    if kind == "circle":
        c = (side - 1) / 2.0
        yy, xx = np.mgrid[0:side, 0:side]
        return (((yy - c) ** 2 + (xx - c) ** 2) <= (side / 2.0) ** 2).astype(np.float64)
    raise ValueError(f"unknown mask kind {kind!r}")


def _footprint_halfwidth(side: int, scale: float, rotation: float) -> float:
    # Axis-aligned half-extent of the rotated, scaled square footprint.
    return scale * (side / 2.0) * (abs(math.cos(rotation)) + abs(math.sin(rotation)))


def _worst_halfwidth(side: int, cfg: TransformConfig) -> float:
    tm = cfg.theta_max
    spread = math.sqrt(2.0) if tm >= math.pi / 4 else math.cos(tm) + math.sin(tm)
    return cfg.scale_range[1] * (side / 2.0) * spread


def _center_bounds(halfwidth: float, extent: int) -> tuple[float, float]:
    # Image physical extent is [-0.5, extent - 0.5] around pixel centers.
    return halfwidth - 0.5, extent - 0.5 - halfwidth


def sample_transform(
    cfg: TransformConfig,
    image_shape: tuple,
    patch_side: int,
    rng: Rng,
) -> AffineTransform:
    """Draw one pose with rotation, scale and location uniform over the config.

    Containment is enforced for the worst case over the configured ranges,
    so every draw from a valid config fully fits inside the image; an
    unsatisfiable config raises GeometryError up front.
    """
    h, w = int(image_shape[0]), int(image_shape[1])
    hw = _worst_halfwidth(patch_side, cfg)
    r_lo, r_hi = _center_bounds(hw, h)
    c_lo, c_hi = _center_bounds(hw, w)
    if r_lo > r_hi + _EDGE_EPS or c_lo > c_hi + _EDGE_EPS:
        raise GeometryError(
            f"patch of side {patch_side} cannot fit in {h}x{w} image "
            f"(worst-case footprint {2 * hw:.2f})"
        )

    theta = float(rng.gen.uniform(-cfg.theta_max, cfg.theta_max)) if cfg.theta_max > 0 else 0.0
    s_min, s_max = cfg.scale_range
    scale = float(rng.gen.uniform(s_min, s_max)) if s_max > s_min else float(s_min)

    if cfg.location is not None:
        l0, l1 = float(cfg.location[0]), float(cfg.location[1])
        if not (r_lo - _EDGE_EPS <= l0 <= r_hi + _EDGE_EPS
                and c_lo - _EDGE_EPS <= l1 <= c_hi + _EDGE_EPS):
            raise GeometryError(
                f"fixed location {cfg.location} leaves the patch outside the "
                f"{h}x{w} image (valid rows [{r_lo:.2f}, {r_hi:.2f}], "
                f"cols [{c_lo:.2f}, {c_hi:.2f}])"
            )
    else:
        l0 = float(rng.gen.uniform(r_lo, r_hi)) if r_hi > r_lo else r_lo
        l1 = float(rng.gen.uniform(c_lo, c_hi)) if c_hi > c_lo else c_lo
    return AffineTransform(rotation=theta, scale=scale, loc=(l0, l1))


def _check_containment(side: int, t: AffineTransform, shape: tuple[int, int]) -> None:
    hw = _footprint_halfwidth(side, t.scale, t.rotation)
    r_lo, r_hi = _center_bounds(hw, shape[0])
    c_lo, c_hi = _center_bounds(hw, shape[1])
    if not (r_lo - _EDGE_EPS <= t.loc[0] <= r_hi + _EDGE_EPS
            and c_lo - _EDGE_EPS <= t.loc[1] <= c_hi + _EDGE_EPS):
        raise GeometryError(
            f"transform {t} places a side-{side} patch outside a "
            f"{shape[0]}x{shape[1]} canvas"
        )


def warp_patch(
    patch: Patch, t: AffineTransform, canvas_shape: tuple
) -> tuple[np.ndarray, np.ndarray]:
    """Warp patch pixels and mask onto a canvas.

    Returns (pixels, mask) of shapes (H, W, C) and (H, W).  Pixels are
    bilinear samples of the patch (zero outside its support); the mask is
    warped with the same map and thresholded back to {0, 1} at 0.5.
    """
    h, w = int(canvas_shape[0]), int(canvas_shape[1])
    _check_containment(patch.side, t, (h, w))
    side, channels = patch.side, patch.channels
    out_px = np.zeros((h, w, channels), dtype=np.float64)
    out_mask = np.zeros((h, w), dtype=np.float64)

    hw = _footprint_halfwidth(side, t.scale, t.rotation)
    r0 = max(0, int(math.floor(t.loc[0] - hw)) - 1)
    r1 = min(h - 1, int(math.ceil(t.loc[0] + hw)) + 1)
    c0 = max(0, int(math.floor(t.loc[1] - hw)) - 1)
    c1 = min(w - 1, int(math.ceil(t.loc[1] + hw)) + 1)
    if r0 > r1 or c0 > c1:
        return out_px, out_mask

    rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    dr = rr - t.loc[0]
    dc = cc - t.loc[1]
    cos_t, sin_t = math.cos(t.rotation), math.sin(t.rotation)
    pc = (side - 1) / 2.0
    # Inverse map: rotate by -theta, unscale, shift to patch coordinates.
    pr = (cos_t * dr + sin_t * dc) / t.scale + pc
    pq = (-sin_t * dr + cos_t * dc) / t.scale + pc

    # Snap near-integer source coordinates so grid-aligned poses stay exact.
    pr_round = np.round(pr)
    pq_round = np.round(pq)
    pr = np.where(np.abs(pr - pr_round) < _SNAP_EPS, pr_round, pr)
    pq = np.where(np.abs(pq - pq_round) < _SNAP_EPS, pq_round, pq)

    fr0 = np.floor(pr)
    fq0 = np.floor(pq)
    wr = pr - fr0
    wq = pq - fq0
    ir0 = fr0.astype(np.int64)
    iq0 = fq0.astype(np.int64)

    px_acc = np.zeros(rr.shape + (channels,), dtype=np.float64)
    mk_acc = np.zeros(rr.shape, dtype=np.float64)
    for d_r, d_q, wgt in (
        (0, 0, (1 - wr) * (1 - wq)),
        (0, 1, (1 - wr) * wq),
        (1, 0, wr * (1 - wq)),
        (1, 1, wr * wq),
    ):
        ri = ir0 + d_r
        qi = iq0 + d_q
        valid = (ri >= 0) & (ri < side) & (qi >= 0) & (qi < side)
        wgt = wgt * valid
        ri_c = np.clip(ri, 0, side - 1)
        qi_c = np.clip(qi, 0, side - 1)
        px_acc += wgt[..., None] * patch.pixels[ri_c, qi_c]
        mk_acc += wgt * patch.mask[ri_c, qi_c]

    out_px[r0:r1 + 1, c0:c1 + 1] = px_acc
    out_mask[r0:r1 + 1, c0:c1 + 1] = (mk_acc >= 0.5).astype(np.float64)
    return out_px, out_mask


def apply_patch(x: np.ndarray, patch: Patch, t: AffineTransform) -> np.ndarray:
    """Composite a patch onto an image at one pose.

    Every output pixel is either the warped patch value (where the warped
    mask is 1) or the original image value; the result stays in [0, 1].
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {x.shape}")
    if x.shape[2] != patch.channels:
        raise ValueError(
            f"channel mismatch: image has {x.shape[2]}, patch has {patch.channels}"
        )
    warped_px, warped_mask = warp_patch(patch, t, x.shape[:2])
    return np.where(warped_mask[..., None] == 1.0, warped_px, x)


def save_patch_bundle(
    directory,
    patch: Patch,
    transform_config: TransformConfig | None = None,
    provenance: dict | None = None,
) -> None:
    """Write a patch as patch.png + mask.png + meta.json in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png(directory / "patch.png", patch.pixels)
    write_png(directory / "mask.png", patch.mask[..., None])
    meta = {
        "side": patch.side,
        "channels": patch.channels,
        "transform": transform_config.to_dict() if transform_config else None,
        "provenance": provenance or {},
    }
    with open(directory / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_patch_bundle(directory) -> tuple[Patch, dict]:
    """Read a patch bundle back; returns (patch, meta dict)."""
    directory = Path(directory)
    with open(directory / "meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    channels = int(meta["channels"])
    pixels = read_png(directory / "patch.png", channels=channels)
    mask_img = read_png(directory / "mask.png", channels=1)
    mask = (mask_img[..., 0] >= 0.5).astype(np.float64)
    patch = Patch(pixels=pixels.astype(np.float64), mask=mask)
    if patch.side != int(meta["side"]):
        raise ValueError(
            f"bundle meta side {meta['side']} != patch.png side {patch.side}"
        )
    return patch, meta
