"""Deterministic ellipsoidal brain phantoms with consistent TICV and PFV masks.

Layout in voxel space (RAS: +x right, +y anterior, +z superior)::

    skull shell  (optional)   ellipsoid, brain axes + CSF margin + skull thickness
    TICV                      ellipsoid, brain axes + CSF margin
    brain regions 1..K        concentric equal-volume shells split into hemispheres;
                              region K is the "cerebellum": brain inside the
                              posterior fossa ellipsoid
    PFV                       TICV inside the posterior fossa ellipsoid, cut to the
                              posterior-inferior octant
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    BinaryMask,
    LabelMap,
    Structure,
    Volume,
    centered_affine,
    load_label_map,
    load_mask,
    load_volume,
    save_label_map,
    save_mask,
    save_volume,
)

MAX_REGIONS = 132
COHORT_MANIFEST = "cohort.json"


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (96, 96, 96)
    num_regions: int = 5
    noise_sigma: float = 10.0
    seed: int = 0
    intensities: tuple[float, ...] | None = None  # per region, scanner units
    skull: bool = True
    jitter: float = 0.0  # relative semi-axis jitter; cohorts use ~0.05
    brain_fraction: float = 0.30  # brain semi-axis as a fraction of the grid extent
    margin_fraction: float = 0.06  # CSF margin between brain and skull
    skull_fraction: float = 0.04
    csf_intensity: float = 150.0
    fossa_csf_intensity: float = 250.0
    skull_intensity: float = 900.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.intensities is not None:
            object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        if self.num_regions < 1:
            raise ValueError("phantom needs at least one region")
        if self.num_regions > MAX_REGIONS:
            raise ValueError(f"phantom supports at most {MAX_REGIONS} regions, got {self.num_regions}")
        if self.intensities is not None and len(self.intensities) != self.num_regions:
            raise ValueError(f"expected {self.num_regions} intensities, got {len(self.intensities)}")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom grid must be 3D with extents >= 8, got {self.shape}")

    def region_intensities(self) -> np.ndarray:
        if self.intensities is not None:
            return np.asarray(self.intensities, dtype=np.float64)
        if self.num_regions == 1:
            return np.array([600.0])
        return np.linspace(350.0, 850.0, self.num_regions)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class Geometry:
    center: np.ndarray
    brain_axes: np.ndarray
    icv_axes: np.ndarray
    skull_axes: np.ndarray
    fossa_center: np.ndarray
    fossa_axes: np.ndarray
    shell_radii: list[float] = field(default_factory=list)

    def brain_volume(self) -> float:
        return 4.0 / 3.0 * math.pi * float(np.prod(self.brain_axes))

    def icv_volume(self) -> float:
        return 4.0 / 3.0 * math.pi * float(np.prod(self.icv_axes))


def _radius(coords, center, axes):
    return np.sqrt(sum(((c - m) / a) ** 2 for c, m, a in zip(coords, center, axes)))


def phantom_geometry(spec: PhantomSpec) -> Geometry:
    rng = np.random.default_rng([spec.seed, 1])
    shape = np.asarray(spec.shape, dtype=np.float64)
    center = (shape - 1) / 2.0
    brain = spec.brain_fraction * shape
    if spec.jitter > 0:
        brain = brain * (1.0 + rng.uniform(-spec.jitter, spec.jitter, 3))
        center = center + rng.uniform(-1.0, 1.0, 3)
    margin = max(spec.margin_fraction * shape.min(), 1.5)
    thick = max(spec.skull_fraction * shape.min(), 1.5)
    icv = brain + margin
    fossa_center = center + np.array([0.0, -0.55 * brain[1], -0.5 * brain[2]])
    fossa_axes = np.array([0.55, 0.45, 0.45]) * brain
    return Geometry(center, brain, icv, icv + thick, fossa_center, fossa_axes)


def _supratentorial_layout(m: int) -> list[tuple[int, int | None]]:
    """(shell, hemisphere) per region; hemisphere None means the shell is unsplit."""
    nshell = math.ceil(m / 2)
    layout = []
    for shell in range(nshell):
        if m % 2 and shell == 0:
            layout.append((shell, None))  # odd count: leave the compact core whole
        else:
            layout += [(shell, 0), (shell, 1)]
    return layout


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap, BinaryMask, BinaryMask]:
    geo = phantom_geometry(spec)
    coords = np.indices(spec.shape, dtype=np.float64)
    r_brain = _radius(coords, geo.center, geo.brain_axes)
    brain = r_brain <= 1.0
    ticv = _radius(coords, geo.center, geo.icv_axes) <= 1.0
    skull = (_radius(coords, geo.center, geo.skull_axes) <= 1.0) & ~ticv
    fossa = (
        (_radius(coords, geo.fossa_center, geo.fossa_axes) <= 1.0)
        & (coords[1] < geo.center[1])
        & (coords[2] < geo.center[2])
    )
    pfv = ticv & fossa

    k = spec.num_regions
    labels = np.zeros(spec.shape, dtype=np.uint8)
    if k == 1:
        labels[brain] = 1
    else:
        labels[brain & fossa] = k
        supra = brain & ~fossa
        layout = _supratentorial_layout(k - 1)
        nshell = layout[-1][0] + 1
        edges = [(i / nshell) ** (1.0 / 3.0) for i in range(nshell + 1)]
        geo.shell_radii = edges
        shell_idx = np.clip(np.searchsorted(edges, r_brain, side="right") - 1, 0, nshell - 1)
        right = coords[0] >= geo.center[0]
        for region, (shell, hemi) in enumerate(layout, start=1):
            sel = supra & (shell_idx == shell)
            if hemi is not None:
                sel &= right if hemi else ~right
            labels[sel] = region
    present = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    if np.any(present == 0):
        empty = [i + 1 for i in np.flatnonzero(present == 0)]
        raise ValueError(f"grid {spec.shape} too small for {k} regions; empty regions {empty}")

    img = np.zeros(spec.shape, dtype=np.float64)
    if spec.skull:
        img[skull] = spec.skull_intensity
    img[ticv] = spec.csf_intensity
    img[pfv] = spec.fossa_csf_intensity
    table = spec.region_intensities()
    for region in range(1, k + 1):
        img[labels == region] = table[region - 1]
    if spec.noise_sigma > 0:
        img += np.random.default_rng([spec.seed, 2]).normal(0.0, spec.noise_sigma, spec.shape)

    affine = centered_affine(spec.shape)
    volume = Volume(img.astype(np.float32), affine, source=f"phantom:{spec.seed}", skull_stripped=not spec.skull)
    return (
        volume,
        LabelMap(labels, affine),
        BinaryMask(ticv.astype(np.uint8), affine, Structure.TICV),
        BinaryMask(pfv.astype(np.uint8), affine, Structure.PFV),
    )


# --------------------------------------------------------------------------- cohorts


def subject_paths(root: Path, sid: str) -> dict[str, Path]:
    return {
        "image": root / "images" / f"{sid}.nii.gz",
        "labels": root / "labels" / f"{sid}_seg.nii.gz",
        "ticv": root / "labels" / f"{sid}_ticv.nii.gz",
        "pfv": root / "labels" / f"{sid}_pfv.nii.gz",
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_cohort(n: int, template: PhantomSpec, seed: int, out_dir: str | Path) -> Path:
    """Write ``n`` jittered phantom subjects plus a ``cohort.json`` manifest."""
    if n < 1:
        raise ValueError("cohort needs at least one subject")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
    subjects = []
    for i, sub_seed in enumerate(seeds):
        sid = f"sub-{i:03d}"
        vol, labels, ticv, pfv = generate_phantom(replace(template, seed=sub_seed))
        paths = subject_paths(root, sid)
        save_volume(vol, paths["image"])
        save_label_map(labels, paths["labels"])
        save_mask(ticv, paths["ticv"])
        save_mask(pfv, paths["pfv"])
        subjects.append(
            {
                "id": sid,
                "seed": sub_seed,
                **{k: str(p.relative_to(root)) for k, p in paths.items()},
                "sha256": {k: _sha256(p) for k, p in paths.items()},
            }
        )
    manifest = {
        "format": "nestseg-cohort",
        "version": 1,
        "seed": seed,
        "num_subjects": n,
        "skull_stripped": not template.skull,
        "template": template.to_dict(),
        "subjects": subjects,
    }
    (root / COHORT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return root


@dataclass
class Subject:
    id: str
    volume: Volume
    labels: LabelMap
    ticv: BinaryMask | None
    pfv: BinaryMask | None


def read_cohort(root: str | Path) -> dict:
    root = Path(root)
    path = root / COHORT_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{root} has no {COHORT_MANIFEST}")
    return json.loads(path.read_text())


def load_subject(root: str | Path, entry: dict) -> Subject:
    root = Path(root)
    ticv = load_mask(root / entry["ticv"], Structure.TICV) if entry.get("ticv") else None
    pfv = load_mask(root / entry["pfv"], Structure.PFV) if entry.get("pfv") else None
    return Subject(entry["id"], load_volume(root / entry["image"]), load_label_map(root / entry["labels"]), ticv, pfv)
