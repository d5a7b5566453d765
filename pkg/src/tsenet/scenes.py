"""Synthetic long-tailed height scenes, the raster container and dataset splits.

Scenes are 3-channel images of flat ground, rectangular LoD1 buildings and
disk-shaped trees.  Every raised object casts a shadow of ``round(h / 2)``
pixels in the +x direction, which is the only monocular height cue.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

GROUND, BUILDING, TREE = 0, 1, 2
CLASS_NAMES = {GROUND: "ground", BUILDING: "building", TREE: "tree"}
LABELED_FRACTIONS = (0.001, 0.005, 0.01, 0.05, 0.1, 1.0)

_ALBEDO = {
    GROUND: np.array([0.46, 0.42, 0.36]),
    BUILDING: np.array([0.70, 0.68, 0.72]),
    TREE: np.array([0.18, 0.42, 0.20]),
}
SHADOW_FACTOR = 0.35
SHADOW_PX_PER_M = 0.5


@dataclass
class SceneConfig:
    size: int = 64
    buildings: tuple[int, int] = (2, 6)
    trees: tuple[int, int] = (2, 8)
    building_side: tuple[int, int] = (6, 14)
    tree_radius: tuple[int, int] = (2, 5)
    h_max: float = 100.0
    noise: float = 0.02


@dataclass
class Scene:
    image: np.ndarray      # (3, H, W) in [0, 1]
    heights: np.ndarray    # (H, W) meters
    semantics: np.ndarray  # (H, W) class ids
    instances: np.ndarray  # (H, W) building ids, 0 = none


def _ground(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 0.5, size=(size // 8 + 1, size // 8 + 1))
    fine = ndimage.zoom(coarse, size / coarse.shape[0], order=1, mode="nearest")[:size, :size]
    return np.clip(fine, 0.0, 0.5)


def _place_rect(rng, occupied: np.ndarray, side: tuple[int, int], attempts: int = 200):
    size = occupied.shape[0]
    for _ in range(attempts):
        h, w = rng.integers(side[0], side[1] + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        # one-pixel moat keeps neighbouring footprints separate
        if not occupied[max(y - 1, 0):y + h + 1, max(x - 1, 0):x + w + 1].any():
            return y, x, h, w
    return None


def cast_shadows(heights: np.ndarray, raised: np.ndarray) -> np.ndarray:
    """Boolean map of ground pixels shaded by raised pixels to their left."""
    size = heights.shape[1]
    cols = np.arange(size)[None, :]
    length = np.where(raised, np.rint(heights * SHADOW_PX_PER_M), -1)
    reach = np.where(raised, cols + length, -1)
    reach = np.maximum.accumulate(reach, axis=1)
    shaded = np.zeros_like(raised)
    shaded[:, 1:] = reach[:, :-1] >= cols[:, 1:]
    return shaded & ~raised


def generate_scene(rng: np.random.Generator, config: SceneConfig | None = None) -> Scene:
    """Draw one scene.

    Raises:
        ValueError: when the requested objects do not fit in the frame.
    """
    cfg = config or SceneConfig()
    size = cfg.size
    heights = _ground(rng, size)
    semantics = np.zeros((size, size), dtype=np.int64)
    instances = np.zeros((size, size), dtype=np.int64)
    roof_albedo = np.zeros((size, size))

    n_buildings = int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1))
    for b in range(1, n_buildings + 1):
        spot = _place_rect(rng, semantics > 0, cfg.building_side)
        if spot is None:
            raise ValueError(
                f"overcrowded scene: cannot place building {b} of {n_buildings} in {size}x{size}"
            )
        y, x, h, w = spot
        roof = min(3.0 * (1.0 + rng.pareto(1.5)), cfg.h_max)
        heights[y:y + h, x:x + w] = roof
        semantics[y:y + h, x:x + w] = BUILDING
        instances[y:y + h, x:x + w] = b
        roof_albedo[y:y + h, x:x + w] = rng.uniform(-0.08, 0.08)

    n_trees = int(rng.integers(cfg.trees[0], cfg.trees[1] + 1))
    yy, xx = np.mgrid[:size, :size]
    placed = 0
    for _ in range(50 * max(n_trees, 1)):
        if placed == n_trees:
            break
        rad = rng.integers(cfg.tree_radius[0], cfg.tree_radius[1] + 1)
        cy, cx = rng.integers(0, size, size=2)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        if (semantics[disk] > 0).mean() > 0.5:
            continue
        disk &= semantics == GROUND
        heights[disk] = float(np.clip(rng.gamma(4.0, 2.0), 2.0, 30.0))
        semantics[disk] = TREE
        placed += 1
    if placed < n_trees:
        raise ValueError(f"overcrowded scene: placed {placed} of {n_trees} trees")

    raised = semantics != GROUND
    shaded = cast_shadows(heights, raised)
    image = np.empty((3, size, size))
    for cls, albedo in _ALBEDO.items():
        sel = semantics == cls
        image[:, sel] = albedo[:, None]
    image[:, semantics == BUILDING] += roof_albedo[semantics == BUILDING]
    image[:, shaded] *= SHADOW_FACTOR
    image += rng.normal(0.0, cfg.noise, size=image.shape)
    return Scene(np.clip(image, 0.0, 1.0), heights, semantics, instances)


# ----------------------------------------------------------------------------
# raster container

RASTER_MAGIC = b"TSER"
RASTER_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint16"): 2}
_HEADER = struct.Struct("<4sIBIII")


def write_raster(path: str | Path, raster: np.ndarray, dtype=None) -> None:
    """Write a ``(C, H, W)`` or ``(H, W)`` raster; ``dtype`` is f32, f64 or u16."""
    arr = np.asarray(raster)
    if dtype is not None:
        arr = arr.astype(dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    code = _CODES.get(arr.dtype.newbyteorder("=") if arr.dtype.byteorder == ">" else arr.dtype)
    if code is None:
        raise ValueError(f"unsupported raster dtype {arr.dtype}")
    c, h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, code, c, h, w) + payload)


def read_raster(path: str | Path) -> np.ndarray:
    """Read a raster as ``(C, H, W)`` in its stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: header truncated, expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, code, c, h, w = _HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0")
    if version != RASTER_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code} at byte 8")
    dt = _DTYPES[code]
    expected = _HEADER.size + c * h * w * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(c, h, w).copy()


# ----------------------------------------------------------------------------
# dataset on disk

SPLITS = ("labeled", "unlabeled", "val", "test")


@dataclass
class DatasetManifest:
    seed: int
    h_max: float
    labeled_fraction: float
    scenes: list[dict]

    def files(self, split: str) -> list[dict]:
        return [s for s in self.scenes if s["split"] == split]

    def counts(self) -> dict[str, int]:
        return {k: len(self.files(k)) for k in SPLITS}

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "h_max": self.h_max,
            "labeled_fraction": self.labeled_fraction,
            "scenes": self.scenes,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(doc["seed"], doc["h_max"], doc.get("labeled_fraction", 1.0), doc["scenes"])


def split_indices(n: int, labeled_fraction: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """60/20/20 train/val/test, then the labeled share of train (at least one scene)."""
    if n < 10:
        raise ValueError(f"need at least 10 scenes to split, got {n}")
    if labeled_fraction not in LABELED_FRACTIONS:
        raise ValueError(f"labeled fraction {labeled_fraction} not in {LABELED_FRACTIONS}")
    perm = rng.permutation(n)
    n_train, n_val = round(0.6 * n), round(0.2 * n)
    train, val, test = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    n_lab = round(labeled_fraction * n_train)
    if n_lab == 0:
        logger.warning("labeled fraction %s of %d train scenes rounds to 0; using 1", labeled_fraction, n_train)
        n_lab = 1
    return {
        "labeled": np.sort(train[:n_lab]),
        "unlabeled": np.sort(train[n_lab:]),
        "val": np.sort(val),
        "test": np.sort(test),
    }


def scene_files(index: int) -> dict[str, str]:
    stem = f"scenes/scene_{index:05d}"
    return {k: f"{stem}_{k}.tser" for k in ("image", "heights", "semantics", "instances")}


def make_splits(n_scenes: int, labeled_fraction: float, rng: np.random.Generator,
                seed: int = 0, h_max: float = 100.0) -> DatasetManifest:
    parts = split_indices(n_scenes, labeled_fraction, rng)
    tag = np.empty(n_scenes, dtype=object)
    for split, idx in parts.items():
        tag[idx] = split
    scenes = [dict(scene_files(i), split=str(tag[i])) for i in range(n_scenes)]
    manifest = DatasetManifest(seed, h_max, labeled_fraction, scenes)
    check_manifest(manifest, n_scenes)
    return manifest


def check_manifest(manifest: DatasetManifest, n_scenes: int | None = None) -> None:
    images = [s["image"] for s in manifest.scenes]
    if len(set(images)) != len(images):
        raise ValueError("manifest lists a scene twice")
    bad = {s["split"] for s in manifest.scenes} - set(SPLITS)
    if bad:
        raise ValueError(f"manifest has unknown split tags {sorted(bad)}")
    if n_scenes is not None and len(images) != n_scenes:
        raise ValueError(f"manifest covers {len(images)} of {n_scenes} scenes")


def write_scene(root: Path, files: dict[str, str], scene: Scene) -> None:
    write_raster(root / files["image"], scene.image, np.float32)
    write_raster(root / files["heights"], scene.heights, np.float32)
    write_raster(root / files["semantics"], scene.semantics, np.uint16)
    write_raster(root / files["instances"], scene.instances, np.uint16)


def read_scene(root: Path, files: dict[str, str]) -> Scene:
    return Scene(
        image=read_raster(root / files["image"]).astype(np.float64),
        heights=read_raster(root / files["heights"])[0].astype(np.float64),
        semantics=read_raster(root / files["semantics"])[0].astype(np.int64),
        instances=read_raster(root / files["instances"])[0].astype(np.int64),
    )


def generate_dataset(root: str | Path, n_scenes: int, seed: int, labeled_fraction: float,
                     config: SceneConfig | None = None) -> DatasetManifest:
    """Write ``n_scenes`` scenes plus ``manifest.json`` under ``root``."""
    if n_scenes <= 0:
        raise ValueError(f"scene count must be positive, got {n_scenes}")
    cfg = config or SceneConfig()
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    scene_seeds = np.random.SeedSequence(seed).spawn(n_scenes + 1)
    for i in range(n_scenes):
        scene = generate_scene(np.random.default_rng(scene_seeds[i]), cfg)
        write_scene(root, scene_files(i), scene)
    manifest = make_splits(n_scenes, labeled_fraction, np.random.default_rng(scene_seeds[-1]),
                           seed=seed, h_max=cfg.h_max)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = DatasetManifest.from_json(path.read_text())
    check_manifest(manifest)
    return manifest


def load_split(root: str | Path, manifest: DatasetManifest, split: str) -> list[Scene]:
    root = Path(root)
    return [read_scene(root, f) for f in manifest.files(split)]
