"""Class activation maps, self-ensembling, and pseudo-label synthesis.

CAMs come from the pre-pool class maps of the two readout heads.  Per
present class the map is clamped at zero and divided by its spatial max;
absent classes are zeroed.  Ensembling averages the two normalized stacks.
Pseudo-labels threshold the per-pixel best class: confident foreground,
confident background, or ignore, then upscale to image resolution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .imageio import write_pgm, write_ppm
from .tensor import Tensor

IGNORE = 255


def _as_array(class_map) -> np.ndarray:
    return class_map.data if isinstance(class_map, Tensor) else np.asarray(class_map)


def extract_cam(class_map, label: np.ndarray) -> np.ndarray:
    """Normalize a (L, H, W) class map into per-class [0,1] activation maps.

    Present classes: negatives clamp to zero, then division by the spatial
    max (skipped when the whole map is non-positive, leaving zeros).
    Absent classes are all-zero.
    """
    raw = _as_array(class_map)
    label = np.asarray(label)
    if raw.ndim != 3 or raw.shape[0] != label.size:
        raise ShapeError(f"class map {raw.shape} does not match label {label.shape}")
    cams = np.zeros_like(raw)
    for c in np.flatnonzero(label):
        m = np.maximum(raw[c], 0.0)
        peak = m.max()
        cams[c] = m / peak if peak > 0 else m
    return cams


def ensemble(cams_m: np.ndarray, cams_g: np.ndarray) -> np.ndarray:
    """Elementwise average of two CAM stacks."""
    if cams_m.shape != cams_g.shape:
        raise ShapeError(f"CAM stacks disagree: {cams_m.shape} vs {cams_g.shape}")
    return 0.5 * (cams_m + cams_g)


@dataclass
class CamStack:
    """Normalized CAMs for one image from both heads and their ensemble."""

    sample_id: int
    cams_m: np.ndarray  # (L, H, W) in [0,1]
    cams_g: np.ndarray
    cams_ens: np.ndarray
    present_classes: np.ndarray  # multi-hot label

    def by_source(self, source: str) -> np.ndarray:
        try:
            return {"m": self.cams_m, "g": self.cams_g,
                    "ens": self.cams_ens}[source]
        except KeyError:
            raise ContractError(f"unknown CAM source {source!r}") from None


def build_cam_stack(sample_id: int, inter_map, graph_map,
                    label: np.ndarray) -> CamStack:
    cams_m = extract_cam(inter_map, label)
    cams_g = extract_cam(graph_map, label)
    return CamStack(sample_id=sample_id, cams_m=cams_m, cams_g=cams_g,
                    cams_ens=ensemble(cams_m, cams_g), present_classes=label)


@dataclass
class PseudoLabel:
    """Pixel mask in {0..L} with IGNORE for undecided pixels."""

    mask: np.ndarray  # (H0, W0) uint8
    provenance: str


def make_pseudo_label(cams: np.ndarray, label: np.ndarray, theta_fg: float,
                      theta_bg: float, image_hw: tuple[int, int],
                      provenance: str = "ens") -> PseudoLabel:
    """Threshold the per-pixel best present class into a pseudo mask.

    M(p) = max over present classes; its argmax (smallest index on ties)
    becomes the class when M >= theta_fg, background when M < theta_bg,
    IGNORE otherwise.  Class c occupies mask value c+1; 0 is background.
    The mask is nearest-neighbor upscaled to image resolution.
    """
    if not 0.0 <= theta_bg < theta_fg <= 1.0:
        raise ContractError(f"need 0 <= theta_bg < theta_fg <= 1, got "
                            f"bg={theta_bg}, fg={theta_fg}")
    label = np.asarray(label)
    present = np.flatnonzero(label)
    h, w = cams.shape[1:]
    h0, w0 = image_hw
    if h0 % h or w0 % w:
        raise ShapeError(f"image size {image_hw} is not a multiple of CAM "
                         f"size {(h, w)}")
    mask = np.zeros((h, w), dtype=np.uint8)
    if present.size:
        stack = cams[present]  # (P, H, W)
        best = stack.max(axis=0)
        arg = present[np.argmax(stack, axis=0)]  # smallest class on ties
        mask[:] = IGNORE
        mask[best < theta_bg] = 0
        fg = best >= theta_fg
        mask[fg] = (arg + 1).astype(np.uint8)[fg]
    full = mask.repeat(h0 // h, axis=0).repeat(w0 // w, axis=1)
    return PseudoLabel(mask=full, provenance=provenance)


# -- export -------------------------------------------------------------------


def save_heatmap(path: str | os.PathLike, cam: np.ndarray) -> None:
    """One CAM channel as an 8-bit PGM."""
    write_pgm(path, np.round(np.clip(cam, 0.0, 1.0) * 255).astype(np.uint8))


def save_overlay(path: str | os.PathLike, image: np.ndarray,
                 cam: np.ndarray) -> None:
    """Blend a heat tint over the grayscale image and write a PPM.

    ``image`` is (3, H0, W0) in [0,1]; ``cam`` is (H, W) in [0,1] and is
    upscaled by nearest neighbor.
    """
    h0, w0 = image.shape[1:]
    up = cam.repeat(h0 // cam.shape[0], axis=0).repeat(w0 // cam.shape[1], axis=1)
    gray = image.mean(axis=0)
    heat = np.stack([up, 0.15 * up, 1.0 - up], axis=-1)
    blended = 0.5 * gray[..., None] + 0.5 * heat
    write_ppm(path, np.round(np.clip(blended, 0.0, 1.0) * 255).astype(np.uint8))


def save_pseudo_label(path: str | os.PathLike, pseudo: PseudoLabel) -> None:
    """Mask as PGM: pixel value = class index, 255 = ignore."""
    write_pgm(path, pseudo.mask)
