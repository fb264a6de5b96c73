"""Shared domain types, the label protocol and NIfTI I/O."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import nibabel as nib
import numpy as np

NUM_CLASSES = 133
MNI_SHAPE = (172, 220, 156)
MNI_SPACING = (1.0, 1.0, 1.0)
MNI_TEMPLATE = "MNI305"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        # copy so freezing never flips the flag on a caller's array
        a = a.copy()
        a.flags.writeable = False
    return a


def check_affine(affine: np.ndarray) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.all(np.isfinite(affine)):
        raise ValueError("affine has non-finite entries")
    if abs(np.linalg.det(affine)) <= 1e-12:
        raise ValueError("affine is not invertible")
    return affine


class Structure(str, enum.Enum):
    TICV = "TICV"
    PFV = "PFV"


@dataclass(frozen=True)
class Grid:
    """A voxel lattice: array shape plus voxel-index -> world-mm affine."""

    shape: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "affine", _frozen(check_affine(self.affine)))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(float(v) for v in np.linalg.norm(self.affine[:3, :3], axis=0))

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.shape == other.shape
            and np.array_equal(self.affine, other.affine)
        )


def centered_affine(shape, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """RAS affine placing world (0, 0, 0) at voxel ``shape // 2``; integer offsets."""
    aff = np.diag([*spacing, 1.0]).astype(np.float64)
    aff[:3, 3] = [-(s // 2) * sp for s, sp in zip(shape, spacing)]
    return aff


@dataclass(frozen=True)
class MniGrid:
    shape: tuple[int, int, int] = MNI_SHAPE
    spacing: tuple[float, float, float] = MNI_SPACING
    template: str = MNI_TEMPLATE

    def __post_init__(self):
        if (tuple(self.shape), tuple(self.spacing), self.template) != (MNI_SHAPE, MNI_SPACING, MNI_TEMPLATE):
            raise ValueError("the MNI grid is fixed at 172x220x156, 1 mm isotropic, MNI305")

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, centered_affine(self.shape, self.spacing))


MNI = MniGrid()


@dataclass(frozen=True)
class LabelProtocol:
    entries: tuple[tuple[int, str], ...]
    name: str = "BrainCOLOR"
    version: str = "1.0"

    def __post_init__(self):
        entries = tuple((int(i), str(n)) for i, n in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"label protocol has duplicate ids {dupes}")
        if sorted(ids) != list(range(NUM_CLASSES)):
            missing = sorted(set(range(NUM_CLASSES)) - set(ids))
            extra = sorted(set(ids) - set(range(NUM_CLASSES)))
            raise ValueError(
                f"label protocol needs ids 0..{NUM_CLASSES - 1} exactly; missing {missing}, unexpected {extra}"
            )
        object.__setattr__(self, "entries", tuple(sorted(entries)))

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def name_of(self, label_id: int) -> str:
        return self.entries[label_id][1]

    @classmethod
    def from_json(cls, path: str | Path) -> "LabelProtocol":
        doc = json.loads(Path(path).read_text())
        return cls._from_doc(doc)

    @classmethod
    def _from_doc(cls, doc: dict) -> "LabelProtocol":
        entries = tuple((e["id"], e["name"]) for e in doc["entries"])
        return cls(entries, doc.get("protocol", "BrainCOLOR"), str(doc.get("version", "1.0")))

    @classmethod
    def braincolor(cls) -> "LabelProtocol":
        text = resources.files("nestseg.data").joinpath("braincolor_v1.json").read_text()
        return cls._from_doc(json.loads(text))


_DEFAULT_PROTOCOL: LabelProtocol | None = None


def default_protocol() -> LabelProtocol:
    global _DEFAULT_PROTOCOL
    if _DEFAULT_PROTOCOL is None:
        _DEFAULT_PROTOCOL = LabelProtocol.braincolor()
    return _DEFAULT_PROTOCOL


@dataclass(frozen=True)
class Volume:
    """Float intensity grid, channels first: (C, H, W, D)."""

    data: np.ndarray
    affine: np.ndarray
    source: str | None = None
    skull_stripped: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, H, W, D) with every extent >= 1, got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"volume {self.source or ''} contains non-finite values".replace("  ", " "))
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "affine", _frozen(check_affine(self.affine)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.affine)

    def with_data(self, data: np.ndarray, affine: np.ndarray | None = None) -> "Volume":
        return Volume(data, self.affine if affine is None else affine, self.source, self.skull_stripped)


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    affine: np.ndarray
    protocol: LabelProtocol = field(default_factory=default_protocol)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label map must be rank 3, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise ValueError("label map has non-integer values")
        if data.size and (data.min() < 0 or data.max() >= self.protocol.num_classes):
            raise ValueError(
                f"label ids must lie in 0..{self.protocol.num_classes - 1}, "
                f"found range {int(data.min())}..{int(data.max())}"
            )
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8, copy=False)))
        object.__setattr__(self, "affine", _frozen(check_affine(self.affine)))

    @property
    def shape(self):
        return self.data.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.affine)


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    affine: np.ndarray
    structure: Structure

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be rank 3, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8, copy=False)))
        object.__setattr__(self, "affine", _frozen(check_affine(self.affine)))
        object.__setattr__(self, "structure", Structure(self.structure))

    @property
    def shape(self):
        return self.data.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.affine)

    def volume_mm3(self) -> float:
        return float(self.data.sum()) * float(abs(np.linalg.det(self.affine[:3, :3])))


# --------------------------------------------------------------------------- I/O


def _load_canonical(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises several unrelated types for bad headers
        raise ValueError(f"cannot read {path} as NIfTI: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise ValueError(f"{path} is not a NIfTI image")
    if img.ndim not in (3, 4):
        raise ValueError(f"{path}: expected a 3D or 4D image, got {img.ndim}D")
    return nib.as_closest_canonical(img)


def load_volume(path: str | Path, skull_stripped: bool = False) -> Volume:
    img = _load_canonical(path)
    data = np.asarray(img.dataobj).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: image contains non-finite voxels")
    if data.ndim == 4:
        data = np.moveaxis(data, -1, 0)
    return Volume(data, img.affine, str(path), skull_stripped)


def _write(data: np.ndarray, affine: np.ndarray, path: str | Path, dtype) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img = nib.Nifti1Image(np.asarray(data, dtype=dtype), np.asarray(affine, dtype=np.float64))
        img.set_qform(affine, code=1)
        img.set_sform(affine, code=1)
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def save_volume(volume: Volume, path: str | Path) -> Path:
    data = volume.data[0] if volume.data.shape[0] == 1 else np.moveaxis(volume.data, 0, -1)
    return _write(data, volume.affine, path, np.float32)


def save_label_map(labels: LabelMap, path: str | Path) -> Path:
    # re-validate: a LabelMap can be forged with object.__setattr__
    if labels.data.size and int(labels.data.max()) >= labels.protocol.num_classes:
        raise ValueError(f"label id {int(labels.data.max())} outside protocol range")
    return _write(labels.data, labels.affine, path, np.uint8)


def save_mask(mask: BinaryMask, path: str | Path) -> Path:
    return _write(mask.data, mask.affine, path, np.uint8)


def load_label_map(path: str | Path, protocol: LabelProtocol | None = None) -> LabelMap:
    img = _load_canonical(path)
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"{path}: label map must be 3D")
    return LabelMap(data, img.affine, protocol or default_protocol())


def load_mask(path: str | Path, structure: Structure | str) -> BinaryMask:
    img = _load_canonical(path)
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"{path}: mask must be 3D")
    return BinaryMask(data, img.affine, Structure(structure))


def one_hot(labels: LabelMap | np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """(H, W, D) label ids -> (num_classes, H, W, D) uint8 indicator channels."""
    data = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    if data.size and (data.min() < 0 or data.max() >= num_classes):
        raise ValueError(f"label id {int(data.max())} out of range for {num_classes} classes")
    return (data[None] == np.arange(num_classes).reshape(-1, *([1] * data.ndim))).astype(np.uint8)
