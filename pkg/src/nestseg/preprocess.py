"""Input pipeline: optional skull strip -> N4 -> normalise -> register to MNI.

Bias-field correction, skull stripping and registration are external tools
wrapped by :class:`ToolAdapter`; intensity normalisation and affine
resampling are done here.
"""

from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

from .core import MNI, BinaryMask, Grid, LabelMap, Volume, load_volume, save_volume

log = logging.getLogger(__name__)

Image = Union[Volume, LabelMap, BinaryMask]


class ToolError(RuntimeError):
    """An external tool is missing, failed, timed out or produced unusable output."""


class PreprocessError(RuntimeError):
    def __init__(self, message: str, record: "PreprocessRecord"):
        super().__init__(message)
        self.record = record


# --------------------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class NormalizationParams:
    low_pct: float
    high_pct: float
    low_value: float
    high_value: float


def apply_normalization(volume: Volume, params: NormalizationParams) -> Volume:
    lo, hi = params.low_value, params.high_value
    data = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return volume.with_data(data.astype(np.float32))


def normalize_intensity(volume: Volume, low_pct: float = 0.0, high_pct: float = 99.5) -> tuple[Volume, NormalizationParams]:
    """Clip to the [low, high] percentiles then rescale linearly to [0, 1].

    Percentiles snap to actual voxel values (lower bound rounds up, upper
    bound rounds down), which makes the operation idempotent.
    """
    if volume.data.size == 0:
        raise ValueError("cannot normalise an empty volume")
    flat = volume.data.ravel()
    lo = float(np.percentile(flat, low_pct, method="higher"))
    hi = float(np.percentile(flat, high_pct, method="lower"))
    if not hi > lo:
        raise ValueError(f"cannot normalise: percentiles collapse ({low_pct}%={lo}, {high_pct}%={hi}); constant volume?")
    params = NormalizationParams(low_pct, high_pct, lo, hi)
    return apply_normalization(volume, params), params


# --------------------------------------------------------------------------- resampling


def resample_array(
    data: np.ndarray,
    src_affine: np.ndarray,
    transform: np.ndarray,
    target: Grid,
    order: int,
) -> np.ndarray:
    """Pull ``data`` (source voxels) onto ``target`` through a world->world ``transform``."""
    # target voxel -> target world -> source world -> source voxel
    vox = np.linalg.inv(src_affine) @ np.linalg.inv(transform) @ target.affine
    matrix, offset = vox[:3, :3], vox[:3, 3]
    if order == 0:
        # keep the integer dtype so no new label values can appear
        return ndimage.affine_transform(
            data, matrix, offset=offset, output_shape=target.shape, order=0, mode="constant", cval=0,
            output=data.dtype,
        )
    return ndimage.affine_transform(
        data.astype(np.float32), matrix, offset=offset, output_shape=target.shape, order=1, mode="constant", cval=0.0
    )


def apply_affine_resample(image: Image, transform: np.ndarray, target: Grid, interpolation: str | None = None) -> Image:
    """Resample an image onto ``target`` through a source->target world transform.

    Label maps and masks are always nearest-neighbour; asking for trilinear
    on them is an error.
    """
    transform = np.asarray(transform, dtype=np.float64)
    if transform.shape != (4, 4) or abs(np.linalg.det(transform)) <= 1e-12:
        raise ValueError("transform must be an invertible 4x4 matrix")
    is_label = isinstance(image, (LabelMap, BinaryMask))
    if interpolation is None:
        interpolation = "nearest" if is_label else "trilinear"
    if interpolation not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if is_label and interpolation != "nearest":
        raise ValueError("label maps and masks can only be resampled with nearest-neighbour interpolation")
    order = 0 if interpolation == "nearest" else 1
    if isinstance(image, Volume):
        chans = [resample_array(c, image.affine, transform, target, order) for c in image.data]
        return Volume(np.stack(chans), target.affine, image.source, image.skull_stripped)
    out = resample_array(image.data, image.affine, transform, target, 0)
    if isinstance(image, LabelMap):
        return LabelMap(out, target.affine, image.protocol)
    return BinaryMask(out, target.affine, image.structure)


# --------------------------------------------------------------------------- tool adapters


@dataclass(frozen=True)
class ToolAdapter:
    """An external command run on NIfTI files in a private scratch directory.

    ``command`` is a list of argument templates with ``{input}``, ``{output}``,
    ``{affine}`` (registration only: text file receiving the 4x4 native->MNI
    world matrix) and ``{reference}`` placeholders. ``command=None`` is a
    pass-through adapter, which only runs when pass-through is explicitly
    allowed.
    """

    tool_id: str
    command: tuple[str, ...] | None = None
    timeout: float = 3600.0
    kind: str = "volume"  # "volume" or "registration"
    reference: str | None = None

    def __post_init__(self):
        if self.command is not None:
            cmd = self.command
            if isinstance(cmd, str):
                cmd = shlex.split(cmd)
            object.__setattr__(self, "command", tuple(cmd))
        if self.kind not in ("volume", "registration"):
            raise ValueError(f"unknown adapter kind {self.kind!r}")

    @property
    def passthrough(self) -> bool:
        return self.command is None

    def probe(self) -> str | None:
        if self.passthrough:
            return None
        return shutil.which(self.command[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["command"] = list(self.command) if self.command is not None else None
        return d


@dataclass
class StepRecord:
    step: str
    tool: str | None = None
    mode: str = "native"  # native | external | passthrough
    command: list[str] | None = None
    returncode: int | None = None
    stdout: str = ""
    stderr: str = ""
    seconds: float = 0.0
    params: dict = field(default_factory=dict)


@dataclass
class PreprocessRecord:
    native_shape: tuple[int, ...] | None = None
    native_affine: list | None = None
    steps: list[StepRecord] = field(default_factory=list)
    forward_affine: list = field(default_factory=lambda: np.eye(4).tolist())
    normalization: NormalizationParams | None = None
    skull_stripped: bool = False
    adapters: dict = field(default_factory=dict)

    @property
    def forward(self) -> np.ndarray:
        return np.asarray(self.forward_affine, dtype=np.float64)

    @property
    def native_grid(self) -> Grid:
        return Grid(tuple(self.native_shape), np.asarray(self.native_affine))

    def step_names(self) -> list[str]:
        return [s.step for s in self.steps]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalization"] = asdict(self.normalization) if self.normalization else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessRecord":
        d = dict(d)
        d["steps"] = [StepRecord(**s) for s in d.get("steps", [])]
        if d.get("normalization"):
            d["normalization"] = NormalizationParams(**d["normalization"])
        return cls(**d)


def read_affine_file(path: Path) -> np.ndarray:
    try:
        m = np.loadtxt(path, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ToolError(f"cannot parse affine file {path}: {exc}") from exc
    if m.shape != (4, 4) or not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-12:
        raise ToolError(f"affine file {path} does not hold an invertible 4x4 matrix")
    return m


def run_adapter(
    adapter: ToolAdapter,
    volume: Volume,
    record: PreprocessRecord | None = None,
    allow_passthrough: bool = False,
    step: str | None = None,
) -> tuple[Volume, np.ndarray | None]:
    """Run one adapter; returns the output volume and, for registration, the affine."""
    step = step or adapter.tool_id
    entry = StepRecord(step=step, tool=adapter.tool_id)
    if adapter.passthrough:
        if not allow_passthrough:
            raise ToolError(
                f"adapter '{adapter.tool_id}' has no command configured; pass-through needs explicit permission"
            )
        entry.mode = "passthrough"
        if record is not None:
            record.steps.append(entry)
        return volume, (np.eye(4) if adapter.kind == "registration" else None)

    exe = adapter.probe()
    if exe is None:
        raise ToolError(f"tool '{adapter.command[0]}' for adapter '{adapter.tool_id}' not found on PATH")
    with tempfile.TemporaryDirectory(prefix=f"nestseg-{adapter.tool_id}-") as tmp:
        tmp = Path(tmp)
        paths = {
            "input": tmp / "input.nii.gz",
            "output": tmp / "output.nii.gz",
            "affine": tmp / "affine.txt",
            "reference": adapter.reference or "",
        }
        save_volume(volume, paths["input"])
        cmd = [part.format(**{k: str(v) for k, v in paths.items()}) for part in adapter.command]
        entry.mode, entry.command = "external", cmd
        t0 = time.monotonic()
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=adapter.timeout, cwd=tmp)
        except subprocess.TimeoutExpired as exc:
            raise ToolError(f"tool '{adapter.tool_id}' timed out after {adapter.timeout}s") from exc
        entry.seconds = time.monotonic() - t0
        entry.returncode, entry.stdout, entry.stderr = proc.returncode, proc.stdout, proc.stderr
        if record is not None:
            record.steps.append(entry)
        if proc.returncode != 0:
            raise ToolError(f"tool '{adapter.tool_id}' exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
        affine = read_affine_file(paths["affine"]) if adapter.kind == "registration" else None
        if adapter.kind == "registration" and not paths["output"].exists():
            return volume, affine  # registration tools may only emit the matrix
        try:
            out = load_volume(paths["output"], skull_stripped=volume.skull_stripped)
        except (OSError, ValueError) as exc:
            raise ToolError(f"tool '{adapter.tool_id}' produced unusable output: {exc}") from exc
    if adapter.kind == "volume" and out.shape != volume.shape:
        raise ToolError(f"tool '{adapter.tool_id}' changed the grid from {volume.shape} to {out.shape}")
    out = Volume(out.data, volume.affine, volume.source, volume.skull_stripped)
    return out, affine


# --------------------------------------------------------------------------- pipeline


@dataclass
class PreprocessConfig:
    skull_strip: ToolAdapter | None = None
    n4: ToolAdapter = field(default_factory=lambda: ToolAdapter("n4"))
    register: ToolAdapter = field(default_factory=lambda: ToolAdapter("register", kind="registration"))
    low_pct: float = 0.0
    high_pct: float = 99.5
    target: Grid = field(default_factory=lambda: MNI.grid)
    skull_stripped: bool = False

    def adapters(self) -> dict:
        out = {"n4": self.n4.to_dict(), "register": self.register.to_dict()}
        if self.skull_strip is not None:
            out["skull_strip"] = self.skull_strip.to_dict()
        return out


def preprocess(volume: Volume, config: PreprocessConfig, allow_passthrough: bool = False) -> tuple[Volume, PreprocessRecord]:
    """[strip] -> N4 -> normalise -> register; returns the MNI-grid volume and its record.

    On failure a :class:`PreprocessError` carries the record up to that point.
    """
    record = PreprocessRecord(
        native_shape=tuple(volume.shape),
        native_affine=volume.affine.tolist(),
        skull_stripped=config.skull_stripped,
        adapters=config.adapters(),
    )
    current = "start"
    try:
        if config.skull_strip is not None:
            current = "skull_strip"
            volume, _ = run_adapter(config.skull_strip, volume, record, allow_passthrough, step="skull_strip")
            volume = Volume(volume.data, volume.affine, volume.source, skull_stripped=True)
        current = "n4"
        volume, _ = run_adapter(config.n4, volume, record, allow_passthrough, step="n4")
        current = "normalize"
        volume, params = normalize_intensity(volume, config.low_pct, config.high_pct)
        record.normalization = params
        record.steps.append(StepRecord(step="normalize", params=asdict(params)))
        current = "register"
        _, forward = run_adapter(config.register, volume, record, allow_passthrough, step="register")
        record.forward_affine = forward.tolist()
        current = "resample"
        mni = apply_affine_resample(volume, forward, config.target, "trilinear")
        record.steps.append(StepRecord(step="resample", params={"target_shape": list(config.target.shape)}))
    except (ToolError, ValueError, OSError) as exc:
        raise PreprocessError(f"preprocessing failed at step '{current}': {exc}", record) from exc
    return mni, record


def replay(volume: Volume, record: PreprocessRecord, target: Grid | None = None, allow_passthrough: bool = True) -> Volume:
    """Re-run a recorded chain: adapters again, normalisation and registration from the record."""
    adapters = {k: ToolAdapter(**v) for k, v in record.adapters.items()}
    for step in record.step_names():
        if step in ("skull_strip", "n4"):
            volume, _ = run_adapter(adapters[step], volume, None, allow_passthrough, step=step)
    volume = apply_normalization(volume, record.normalization)
    return apply_affine_resample(volume, record.forward, target or MNI.grid, "trilinear")
