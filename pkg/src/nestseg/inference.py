"""Sliding-window inference, weighted fusion and output assembly.

Two fusion paths share the same window plan and weights:

* :func:`sliding_window_infer` accumulates every window into a full
  ``(C, H, W, D)`` array. Simple, order-agnostic, meant for small grids.
* :func:`iter_fused_slabs` sweeps windows row by row along the first axis and
  yields finished slabs, so a 135-channel MNI-sized logit volume never has to
  exist in memory at once. :func:`segment_volume` builds on it.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import NUM_CLASSES, BinaryMask, Grid, LabelMap, Structure, Volume
from .preprocess import apply_affine_resample

Predictor = Callable[[np.ndarray], np.ndarray]
Triple = tuple[int, int, int]


@dataclass(frozen=True)
class WindowPlan:
    grid_shape: Triple  # shape of the (possibly padded) grid the corners index into
    window: Triple
    overlap: float
    corners: tuple[Triple, ...]
    weighting: str = "gaussian"
    pad: tuple[tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0))

    @property
    def padded_shape(self) -> Triple:
        return tuple(s + a + b for s, (a, b) in zip(self.grid_shape, self.pad))

    def to_dict(self) -> dict:
        return {
            "grid_shape": list(self.grid_shape),
            "window": list(self.window),
            "overlap": self.overlap,
            "weighting": self.weighting,
            "pad": [list(p) for p in self.pad],
            "num_windows": len(self.corners),
        }


def _axis_corners(extent: int, window: int, stride: int) -> list[int]:
    if extent <= window:
        return [0]
    corners = list(range(0, extent - window, stride))
    corners.append(extent - window)  # last window shifted inward to end at the edge
    return sorted(set(corners))


def plan_windows(grid_shape, window, overlap: float = 0.5, weighting: str = "gaussian") -> WindowPlan:
    """Cover ``grid_shape`` with windows at stride ``window * (1 - overlap)``.

    Axes shorter than the window are padded symmetrically; the pad is part of
    the plan so fusion can crop it off again.
    """
    grid_shape = tuple(int(s) for s in grid_shape)
    window = tuple(int(w) for w in (window if not isinstance(window, int) else (window,) * 3))
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if weighting not in ("gaussian", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    pad = []
    for s, w in zip(grid_shape, window):
        extra = max(w - s, 0)
        pad.append((extra // 2, extra - extra // 2))
    padded = [s + a + b for s, (a, b) in zip(grid_shape, pad)]
    strides = [max(1, int(w * (1.0 - overlap))) for w in window]
    axes = [_axis_corners(s, w, st) for s, w, st in zip(padded, window, strides)]
    corners = tuple(itertools.product(*axes))
    return WindowPlan(grid_shape, window, float(overlap), corners, weighting, tuple(pad))


def window_weights(window: Triple, weighting: str = "gaussian") -> np.ndarray:
    """Per-voxel fusion weight inside one window; Gaussian sigma = window / 8."""
    if weighting == "uniform":
        return np.ones(window, dtype=np.float64)
    axes = []
    for w in window:
        x = np.arange(w, dtype=np.float64)
        sigma = w / 8.0
        axes.append(np.exp(-((x - (w - 1) / 2.0) ** 2) / (2.0 * sigma**2)))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def _padded_data(volume: Volume | np.ndarray, plan: WindowPlan) -> np.ndarray:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    if data.ndim == 3:
        data = data[None]
    if tuple(data.shape[1:]) != plan.grid_shape:
        raise ValueError(f"volume grid {tuple(data.shape[1:])} does not match plan grid {plan.grid_shape}")
    if any(a or b for a, b in plan.pad):
        data = np.pad(data, ((0, 0), *plan.pad))
    return data


def _run_batches(data, corners, window, predictor, batch_size) -> Iterator[tuple[Triple, np.ndarray]]:
    for start in range(0, len(corners), batch_size):
        chunk = corners[start : start + batch_size]
        batch = np.stack(
            [data[:, x : x + window[0], y : y + window[1], z : z + window[2]] for x, y, z in chunk]
        )
        out = np.asarray(predictor(batch))
        if out.ndim != 5 or tuple(out.shape[2:]) != window or out.shape[0] != len(chunk):
            raise ValueError(f"predictor returned shape {out.shape} for a batch of {len(chunk)} windows of {window}")
        yield from zip(chunk, out)


def _crop_pad(arr: np.ndarray, plan: WindowPlan) -> np.ndarray:
    sl = tuple(slice(a, a + s) for (a, _), s in zip(plan.pad, plan.grid_shape))
    return arr[(slice(None), *sl)]


def sliding_window_infer(
    volume: Volume | np.ndarray,
    predictor: Predictor,
    plan: WindowPlan,
    order: Sequence[int] | None = None,
    batch_size: int = 1,
) -> np.ndarray:
    """Fuse per-window predictions into one ``(C, H, W, D)`` float64 array.

    ``order`` permutes window evaluation; the result depends on it only through
    floating-point summation order.
    """
    data = _padded_data(volume, plan)
    corners = [plan.corners[i] for i in order] if order is not None else list(plan.corners)
    weights = window_weights(plan.window, plan.weighting)
    acc = None
    norm = np.zeros(plan.padded_shape, dtype=np.float64)
    wx, wy, wz = plan.window
    for (x, y, z), out in _run_batches(data, corners, plan.window, predictor, batch_size):
        if acc is None:
            acc = np.zeros((out.shape[0], *plan.padded_shape), dtype=np.float64)
        acc[:, x : x + wx, y : y + wy, z : z + wz] += out * weights
        norm[x : x + wx, y : y + wy, z : z + wz] += weights
    return _crop_pad(acc / norm, plan)


def fusion_weight_sum(plan: WindowPlan) -> np.ndarray:
    """Sum over windows of the normalised weights at each voxel (should be 1)."""
    weights = window_weights(plan.window, plan.weighting)
    norm = np.zeros(plan.padded_shape, dtype=np.float64)
    per_window = []
    wx, wy, wz = plan.window
    for x, y, z in plan.corners:
        norm[x : x + wx, y : y + wy, z : z + wz] += weights
        per_window.append((x, y, z))
    total = np.zeros(plan.padded_shape, dtype=np.float64)
    for x, y, z in per_window:
        total[x : x + wx, y : y + wy, z : z + wz] += weights / norm[x : x + wx, y : y + wy, z : z + wz]
    return _crop_pad(total[None], plan)[0]


def coverage_count(plan: WindowPlan) -> np.ndarray:
    count = np.zeros(plan.padded_shape, dtype=np.int32)
    wx, wy, wz = plan.window
    for x, y, z in plan.corners:
        count[x : x + wx, y : y + wy, z : z + wz] += 1
    return _crop_pad(count[None], plan)[0]


def iter_fused_slabs(
    volume: Volume | np.ndarray,
    predictor: Predictor,
    plan: WindowPlan,
    batch_size: int = 1,
) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(x0, x1, fused)`` slabs along axis 0 in unpadded coordinates.

    Windows are processed in rows of equal first-axis corner. After a row is
    done, every voxel before the next row's corner is final and is emitted.
    """
    data = _padded_data(volume, plan)
    weights = window_weights(plan.window, plan.weighting).astype(np.float32)
    wx, wy, wz = plan.window
    rows: dict[int, list[Triple]] = {}
    for c in plan.corners:
        rows.setdefault(c[0], []).append(c)
    row_starts = sorted(rows)
    padded = plan.padded_shape
    pad0 = plan.pad[0][0]
    acc = None
    norm = np.zeros((wx, *padded[1:]), dtype=np.float32)
    base = row_starts[0]  # padded x of acc[:, 0]
    for i, x0 in enumerate(row_starts):
        shift = x0 - base
        if acc is not None and shift:
            acc[:, : wx - shift] = acc[:, shift:].copy()
            acc[:, wx - shift :] = 0
            norm[: wx - shift] = norm[shift:].copy()
            norm[wx - shift :] = 0
        base = x0
        for (x, y, z), out in _run_batches(data, rows[x0], plan.window, predictor, batch_size):
            if acc is None:
                acc = np.zeros((out.shape[0], wx, *padded[1:]), dtype=np.float32)
            acc[:, :, y : y + wy, z : z + wz] += out * weights
            norm[:, y : y + wy, z : z + wz] += weights
        done_until = row_starts[i + 1] if i + 1 < len(row_starts) else x0 + wx
        n = done_until - x0
        fused = acc[:, :n] / norm[:n]
        # translate padded coordinates back to the caller's grid
        lo, hi = x0 - pad0, x0 - pad0 + n
        clip_lo, clip_hi = max(lo, 0), min(hi, plan.grid_shape[0])
        if clip_hi > clip_lo:
            sl1 = slice(plan.pad[1][0], plan.pad[1][0] + plan.grid_shape[1])
            sl2 = slice(plan.pad[2][0], plan.pad[2][0] + plan.grid_shape[2])
            yield clip_lo, clip_hi, fused[:, clip_lo - lo : clip_hi - lo, sl1, sl2]


# --------------------------------------------------------------------------- assembly


@dataclass
class SegmentationResult:
    labels: LabelMap
    ticv: BinaryMask | None
    pfv: BinaryMask | None
    probabilities: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def outputs(self):
        return [x for x in (self.labels, self.ticv, self.pfv) if x is not None]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def _assemble_arrays(fused: np.ndarray, num_classes: int):
    labels = np.argmax(fused[:num_classes], axis=0).astype(np.uint8)
    if fused.shape[0] == num_classes:
        return labels, None, None
    ticv = (_sigmoid(fused[num_classes]) >= 0.5).astype(np.uint8)
    pfv = (_sigmoid(fused[num_classes + 1]) >= 0.5).astype(np.uint8)
    return labels, ticv, pfv


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(np.uint8)
    sizes = np.bincount(lab.ravel())[1:]
    return (lab == (np.argmax(sizes) + 1)).astype(np.uint8)


def assemble_outputs(
    fused: np.ndarray,
    affine: np.ndarray,
    num_classes: int = NUM_CLASSES,
    keep_largest_component: bool = False,
) -> SegmentationResult:
    """Argmax labels over the brain channels; TICV/PFV = sigmoid >= 0.5 (inclusive)."""
    if fused.ndim != 4 or fused.shape[0] != num_classes + 2:
        raise ValueError(f"expected {num_classes + 2} fused channels, got shape {fused.shape}")
    labels, ticv, pfv = _assemble_arrays(fused, num_classes)
    if keep_largest_component:
        ticv, pfv = largest_component(ticv), largest_component(pfv)
    return SegmentationResult(
        LabelMap(labels, affine),
        BinaryMask(ticv, affine, Structure.TICV),
        BinaryMask(pfv, affine, Structure.PFV),
    )


def segment_volume(
    volume: Volume,
    predictor: Predictor,
    plan: WindowPlan,
    num_classes: int = NUM_CLASSES,
    batch_size: int = 1,
    keep_largest_component: bool = False,
    probability_sink: np.ndarray | None = None,
) -> SegmentationResult:
    """Streaming sliding-window segmentation of a whole volume.

    Works with 133-channel (brain only) or 135-channel predictors; TICV/PFV
    masks are ``None`` for the former. ``probability_sink`` (e.g. a memmap of
    shape ``(C, H, W, D)``) receives softmax/sigmoid probabilities when given.
    """
    labels = np.zeros(volume.shape, dtype=np.uint8)
    ticv = pfv = None
    for x0, x1, fused in iter_fused_slabs(volume, predictor, plan, batch_size):
        if fused.shape[0] not in (num_classes, num_classes + 2):
            raise ValueError(f"predictor produced {fused.shape[0]} channels, expected {num_classes} or {num_classes + 2}")
        lab, t, p = _assemble_arrays(fused, num_classes)
        labels[x0:x1] = lab
        if t is not None:
            if ticv is None:
                ticv = np.zeros(volume.shape, dtype=np.uint8)
                pfv = np.zeros(volume.shape, dtype=np.uint8)
            ticv[x0:x1], pfv[x0:x1] = t, p
        if probability_sink is not None:
            brain = fused[:num_classes].astype(np.float64)
            brain = np.exp(brain - brain.max(axis=0, keepdims=True))
            probability_sink[:num_classes, x0:x1] = brain / brain.sum(axis=0, keepdims=True)
            if t is not None:
                probability_sink[num_classes:, x0:x1] = _sigmoid(fused[num_classes:])
    if keep_largest_component and ticv is not None:
        ticv, pfv = largest_component(ticv), largest_component(pfv)
    affine = volume.affine
    return SegmentationResult(
        LabelMap(labels, affine),
        BinaryMask(ticv, affine, Structure.TICV) if ticv is not None else None,
        BinaryMask(pfv, affine, Structure.PFV) if pfv is not None else None,
        probabilities=probability_sink,
        manifest={"window_plan": plan.to_dict()},
    )


def model_predictor(model: torch.nn.Module, finetune_mode: bool | None = None) -> Predictor:
    """Wrap a network as a numpy ``(B, 1, *window) -> (B, C, *window)`` predictor."""
    param = next(model.parameters())

    def predict(batch: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                x = torch.from_numpy(np.ascontiguousarray(batch)).to(param.dtype)
                out = model(x, finetune_mode=finetune_mode)
                return out.stacked().float().numpy()
        finally:
            model.train(was_training)

    return predict


def inverse_transform(result: SegmentationResult, forward: np.ndarray, native: Grid) -> SegmentationResult:
    """Pull MNI-space outputs back onto the native grid with nearest-neighbour sampling.

    ``forward`` is the recorded native-world -> MNI-world affine.
    """
    forward = np.asarray(forward, dtype=np.float64)
    if abs(np.linalg.det(forward)) <= 1e-12:
        raise ValueError("recorded forward affine is not invertible")
    inv = np.linalg.inv(forward)  # MNI world -> native world, the direction outputs travel
    labels = apply_affine_resample(result.labels, inv, native, "nearest")
    ticv = apply_affine_resample(result.ticv, inv, native, "nearest") if result.ticv is not None else None
    pfv = apply_affine_resample(result.pfv, inv, native, "nearest") if result.pfv is not None else None
    manifest = dict(result.manifest)
    manifest["inverse_transform"] = {"forward_affine": forward.tolist(), "native_shape": list(native.shape)}
    return SegmentationResult(labels, ticv, pfv, None, manifest)


def array_checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()
