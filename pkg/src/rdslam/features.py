"""Decoding of network-style prediction volumes into keypoints.

A prediction volume holds, per ``C x C`` image cell, 65 logits: 64 for the
pixels of the cell (row-major inside the cell) and one "no keypoint" channel.
Everything downstream works with *negative-log* repeatability, so a smaller
value means a more keypoint-like pixel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

CELL = 8
COV_FLOOR = 1e-4


class CorruptVolumeError(ValueError):
    pass


class ParamMode(enum.Enum):
    """Keypoint measurement model: peak vs. weighted mean, identity vs. heatmap covariance."""

    EI = "EI"
    EC = "EC"
    MI = "MI"
    MC = "MC"

    @property
    def uses_mean(self) -> bool:
        return self in (ParamMode.MI, ParamMode.MC)

    @property
    def uses_covariance(self) -> bool:
        return self in (ParamMode.EC, ParamMode.MC)


@dataclass
class PredictionVolume:
    logits: np.ndarray  # (Hc, Wc, C*C+1)
    descriptors: np.ndarray  # (Hc, Wc, D)
    embedding: np.ndarray | None = None  # (G,)
    cell: int = CELL

    def __post_init__(self):
        if self.logits.ndim != 3 or self.descriptors.ndim != 3:
            raise CorruptVolumeError("logits and descriptors must be 3-D volumes")
        hc, wc, ch = self.logits.shape
        if ch != self.cell * self.cell + 1:
            raise CorruptVolumeError(f"expected {self.cell ** 2 + 1} channels, got {ch}")
        if self.descriptors.shape[:2] != (hc, wc):
            raise CorruptVolumeError("descriptor grid does not match logit grid")

    @property
    def height(self) -> int:
        return self.logits.shape[0] * self.cell

    @property
    def width(self) -> int:
        return self.logits.shape[1] * self.cell

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[2]


@dataclass
class RepeatabilityMaps:
    patchwise: np.ndarray  # (Hc, Wc), probability of "no keypoint"
    pixelwise: np.ndarray  # (H, W), negative log probability
    cell: int = CELL

    @property
    def probability(self) -> np.ndarray:
        return np.exp(-self.pixelwise)


def decode_volume(raw: PredictionVolume) -> np.ndarray:
    """Channel-wise softmax of the logits."""
    logits = np.asarray(raw.logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise CorruptVolumeError("non-finite logits")
    z = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def repeatability_maps(normalized: np.ndarray, cell: int = CELL) -> RepeatabilityMaps:
    hc, wc, _ = normalized.shape
    Rd = normalized[..., cell * cell].copy()
    pix = normalized[..., : cell * cell].reshape(hc, wc, cell, cell)
    pix = pix.transpose(0, 2, 1, 3).reshape(hc * cell, wc * cell)
    with np.errstate(divide="ignore"):
        R = -np.log(pix)
    return RepeatabilityMaps(Rd, R, cell)


def pixels_to_channels(pixel_map: np.ndarray, cell: int = CELL) -> np.ndarray:
    """Inverse of the shuffle: ``(H, W) -> (Hc, Wc, cell*cell)``."""
    h, w = pixel_map.shape
    hc, wc = h // cell, w // cell
    return pixel_map.reshape(hc, cell, wc, cell).transpose(0, 2, 1, 3).reshape(hc, wc, cell * cell)


def bilinear(img: np.ndarray, xy: np.ndarray, margin: float = 0.0):
    """Bilinear sample of ``img`` at ``(x, y)`` (column, row) positions.

    Returns ``(values, gradients, valid)``. Samples outside
    ``[margin, size-1-margin]`` are reported invalid and get zero value and
    gradient.
    """
    xy = np.atleast_2d(xy)
    h, w = img.shape
    x, y = xy[:, 0], xy[:, 1]
    # NaN and inf fail these comparisons, so they come out invalid too
    valid = (x >= margin) & (x <= w - 1 - margin) & (y >= margin) & (y <= h - 1 - margin)
    val = np.zeros(len(xy))
    grad = np.zeros((len(xy), 2))
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return val, grad, valid
    xs, ys = x[idx], y[idx]
    x0 = np.minimum(xs.astype(int), max(w - 2, 0))
    y0 = np.minimum(ys.astype(int), max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    flat = img.ravel()
    i = y0 * w + x0
    v00 = flat[i]
    v01 = flat[i + 1]
    v10 = flat[i + w]
    v11 = flat[i + w + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val[idx] = top + fy * (bot - top)
    grad[idx, 0] = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    grad[idx, 1] = bot - top
    return val, grad, valid


@dataclass
class Keypoint:
    u: np.ndarray
    cov: np.ndarray
    descriptor: np.ndarray
    response: float


@dataclass
class KeypointSet:
    """All keypoints of one frame, stored column-wise."""

    peaks: np.ndarray  # (N, 2) integer pixel of the maximum
    means: np.ndarray  # (N, 2) weighted mean over the 3x3 patch
    covs: np.ndarray  # (N, 2, 2)
    descriptors: np.ndarray  # (N, D)
    responses: np.ndarray  # (N,)
    grid: np.ndarray  # (Hc, Wc) keypoint index or -1
    cell: int = CELL

    def __len__(self) -> int:
        return len(self.peaks)

    def __getitem__(self, i: int) -> Keypoint:
        return Keypoint(self.means[i], self.covs[i], self.descriptors[i], float(self.responses[i]))

    def measurements(self, mode: ParamMode) -> tuple[np.ndarray, np.ndarray]:
        """Pixel measurements and covariances for the given parameterization."""
        u = self.means if mode.uses_mean else self.peaks.astype(float)
        if mode.uses_covariance:
            cov = self.covs
        else:
            cov = np.broadcast_to(np.eye(2), (len(self), 2, 2)).copy()
        return u, cov


def extract_keypoints(
    maps: RepeatabilityMaps, min_probability: float = 0.015, nms_radius: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell maxima that survive a cross-cell NMS.

    Returns ``(locations, grid)`` where ``locations`` is ``(N, 2)`` in
    ``(x, y)`` pixel order and ``grid[hc, wc]`` holds a keypoint index or -1.
    """
    cell = maps.cell
    prob = maps.probability
    hc, wc = maps.patchwise.shape
    blocks = pixels_to_channels(prob, cell)
    arg = blocks.argmax(axis=2)
    best = np.take_along_axis(blocks, arg[..., None], axis=2)[..., 0]
    rows = np.arange(hc)[:, None] * cell + arg // cell
    cols = np.arange(wc)[None, :] * cell + arg % cell
    local_max = maximum_filter(prob, size=2 * nms_radius + 1, mode="constant", cval=0.0)
    keep = (best >= min_probability) & (best >= local_max[rows, cols])
    cand = np.argwhere(keep)
    grid = np.full((hc, wc), -1, dtype=np.int64)
    if len(cand) == 0:
        return np.zeros((0, 2)), grid
    r = rows[cand[:, 0], cand[:, 1]]
    c = cols[cand[:, 0], cand[:, 1]]
    score = best[cand[:, 0], cand[:, 1]]
    # equal-valued maxima within the radius: keep the first in descending order
    order = np.lexsort((c, r, -score))
    kept: list[int] = []
    taken = np.zeros(prob.shape, dtype=bool)
    for i in order:
        if taken[r[i], c[i]]:
            continue
        kept.append(i)
        taken[
            max(r[i] - nms_radius, 0) : r[i] + nms_radius + 1,
            max(c[i] - nms_radius, 0) : c[i] + nms_radius + 1,
        ] = True
    kept_arr = np.array(sorted(kept, key=lambda i: (r[i], c[i])))
    locations = np.column_stack([c[kept_arr], r[kept_arr]]).astype(float)
    grid[cand[kept_arr, 0], cand[kept_arr, 1]] = np.arange(len(kept_arr))
    return locations, grid


def sample_descriptors(descriptors: np.ndarray, uv: np.ndarray, cell: int = CELL) -> np.ndarray:
    """Bilinear descriptor lookup anchored at cell centers, L2-renormalized.

    Raises:
        ValueError: if any location lies outside the image.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    hc, wc, dim = descriptors.shape
    if np.any(uv < 0) or np.any(uv[:, 0] > wc * cell - 1) or np.any(uv[:, 1] > hc * cell - 1):
        raise ValueError("descriptor sample outside image bounds")
    g = (uv - 0.5 * (cell - 1)) / cell
    gx = np.clip(g[:, 0], 0.0, wc - 1)
    gy = np.clip(g[:, 1], 0.0, hc - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, max(wc - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(hc - 2, 0))
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    d = (
        (1 - fx) * (1 - fy) * descriptors[y0, x0]
        + fx * (1 - fy) * descriptors[y0, x1]
        + (1 - fx) * fy * descriptors[y1, x0]
        + fx * fy * descriptors[y1, x1]
    )
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.maximum(n, 1e-12)


def sample_descriptor(descriptors: np.ndarray, u: np.ndarray, cell: int = CELL) -> np.ndarray:
    return sample_descriptors(descriptors, u, cell)[0]


def parameterize_keypoints(
    maps: RepeatabilityMaps, peaks: np.ndarray, floor: float = COV_FLOOR
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of the 3x3 probability patch around each peak.

    Peaks closer than one pixel to the border fall back to ``(peak, I)``.
    """
    peaks = np.atleast_2d(np.asarray(peaks, dtype=float))
    n = len(peaks)
    means = peaks.copy()
    covs = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    if n == 0:
        return means, covs
    h, w = maps.pixelwise.shape
    px = np.rint(peaks[:, 0]).astype(int)
    py = np.rint(peaks[:, 1]).astype(int)
    inner = (px >= 1) & (px <= w - 2) & (py >= 1) & (py <= h - 2)
    if not inner.any():
        return means, covs
    ix, iy = px[inner], py[inner]
    off = np.array([-1, 0, 1])
    ox, oy = np.meshgrid(off, off)
    ox, oy = ox.ravel(), oy.ravel()
    R = maps.pixelwise[iy[:, None] + oy[None, :], ix[:, None] + ox[None, :]]
    # shift by the patch minimum before exponentiating; normalization cancels it
    p = np.exp(-(R - R.min(axis=1, keepdims=True)))
    p /= p.sum(axis=1, keepdims=True)
    mx = p @ ox
    my = p @ oy
    dx = ox[None, :] - mx[:, None]
    dy = oy[None, :] - my[:, None]
    cxx = np.sum(p * dx * dx, axis=1) + floor
    cyy = np.sum(p * dy * dy, axis=1) + floor
    cxy = np.sum(p * dx * dy, axis=1)
    means[inner, 0] = ix + mx
    means[inner, 1] = iy + my
    covs[inner] = np.stack([np.stack([cxx, cxy], -1), np.stack([cxy, cyy], -1)], -2)
    return means, covs


def parameterize_keypoint(maps: RepeatabilityMaps, u_peak: np.ndarray, floor: float = COV_FLOOR):
    means, covs = parameterize_keypoints(maps, np.asarray(u_peak, dtype=float)[None], floor)
    return means[0], covs[0]


def detect(
    volume: PredictionVolume,
    min_probability: float = 0.015,
    nms_radius: int = 4,
    floor: float = COV_FLOOR,
) -> tuple[RepeatabilityMaps, KeypointSet]:
    """Full decode: softmax, maps, NMS, parameterization and descriptors."""
    maps = repeatability_maps(decode_volume(volume), volume.cell)
    peaks, grid = extract_keypoints(maps, min_probability, nms_radius)
    means, covs = parameterize_keypoints(maps, peaks, floor)
    if len(peaks):
        desc = sample_descriptors(volume.descriptors, peaks, volume.cell)
        resp = maps.probability[peaks[:, 1].astype(int), peaks[:, 0].astype(int)]
    else:
        desc = np.zeros((0, volume.descriptor_dim))
        resp = np.zeros(0)
    return maps, KeypointSet(peaks, means, covs, desc, resp, grid, volume.cell)
