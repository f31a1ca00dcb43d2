"""Data ingestion for two-domain orthophoto segmentation.

Covers domain descriptors, the tile-size / ground-sample-distance
compatibility check, raster tiling, palette label coding, nearest label
resizing, line-delimited tile manifests and a synthetic scene generator
whose objects have a fixed metric size (so the same class renders at
different pixel sizes in the two domains).

Image arrays are ``uint8`` of shape ``(H, W, 3)``; label index maps are
integer arrays of shape ``(H, W)``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "ValidationError",
    "PaletteEntry",
    "ClassPalette",
    "ISPRS_PALETTE",
    "DomainSpec",
    "ScaleReport",
    "check_scale_compat",
    "Tile",
    "tile_raster",
    "encode_labels",
    "decode_labels",
    "resize_labels_nearest",
    "resize_image_array",
    "TileRecord",
    "TileManifest",
    "SyntheticDomainConfig",
    "SyntheticSceneConfig",
    "render_scene",
    "generate_synthetic_pair",
    "load_image",
    "save_image",
    "image_to_tensor",
    "tensor_to_image",
    "center_crop",
    "TileStore",
]

# Generator depth >= 4 is the smallest supported configuration.
TILE_DIVISOR = 16
SPLITS = ("train", "val", "test")


class ValidationError(ValueError):
    """Raised when a data object violates its contract."""


# ---------------------------------------------------------------- palettes


@dataclass(frozen=True)
class PaletteEntry:
    name: str
    color: tuple[int, int, int]
    index: int


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class list with unique RGB colors and contiguous indices."""

    entries: tuple[PaletteEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValidationError("palette must contain at least one class")
        if sorted(e.index for e in entries) != list(range(len(entries))):
            raise ValidationError("palette indices must be contiguous 0..C-1")
        colors = [tuple(e.color) for e in entries]
        if len(set(colors)) != len(colors):
            raise ValidationError("palette colors must be unique")
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise ValidationError(f"invalid RGB color {c!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Sequence[int] | str]]) -> "ClassPalette":
        entries = []
        for i, (name, color) in enumerate(pairs):
            if isinstance(color, str):
                color = _hex_to_rgb(color)
            entries.append(PaletteEntry(name, tuple(int(v) for v in color), i))
        return cls(tuple(entries))

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in sorted(self.entries, key=lambda e: e.index)]

    @property
    def colors(self) -> np.ndarray:
        """``(C, 3)`` uint8 color table ordered by class index."""
        ordered = sorted(self.entries, key=lambda e: e.index)
        return np.array([e.color for e in ordered], dtype=np.uint8)

    def to_pairs(self) -> list[tuple[str, str]]:
        return [(e.name, _rgb_to_hex(e.color)) for e in sorted(self.entries, key=lambda e: e.index)]

    def dump(self, path: str | os.PathLike) -> None:
        """Write the palette file: one ``name #rrggbb`` line per class."""
        lines = [f"{name}\t{color}" for name, color in self.to_pairs()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClassPalette":
        pairs = []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, color = line.rsplit(None, 1)
            pairs.append((name.strip(), color))
        return cls.from_pairs(pairs)


def _hex_to_rgb(s: str) -> tuple[int, int, int]:
    s = s.strip().lstrip("#")
    if len(s) != 6:
        raise ValidationError(f"bad hex color {s!r}")
    return tuple(int(s[i : i + 2], 16) for i in (0, 2, 4))


def _rgb_to_hex(c: Sequence[int]) -> str:
    return "#" + "".join(f"{int(v):02x}" for v in c)


# ISPRS 2D labeling benchmark colors, class order clutter, impervious, car,
# tree, low vegetation, building.
ISPRS_PALETTE = ClassPalette.from_pairs(
    [
        ("clutter", (255, 0, 0)),
        ("impervious_surface", (255, 255, 255)),
        ("car", (255, 255, 0)),
        ("tree", (0, 255, 0)),
        ("low_vegetation", (0, 255, 255)),
        ("building", (0, 0, 255)),
    ]
)

CLUTTER, IMPERVIOUS, CAR, TREE, LOW_VEGETATION, BUILDING = range(6)


# ------------------------------------------------------------ domain specs


@dataclass(frozen=True)
class DomainSpec:
    """Identity of one imagery domain.

    ``gsd_cm`` is the ground sample distance (cm per pixel) and ``tile_px``
    the side of the square training tiles.
    """

    name: str
    gsd_cm: float
    tile_px: int
    channels: int = 3
    band_order: str = "RGB"
    palette: ClassPalette = ISPRS_PALETTE

    def __post_init__(self):
        if not (isinstance(self.gsd_cm, (int, float)) and math.isfinite(self.gsd_cm) and self.gsd_cm > 0):
            raise ValidationError(f"{self.name}: gsd_cm must be a positive real, got {self.gsd_cm!r}")
        if int(self.tile_px) != self.tile_px or self.tile_px <= 0:
            raise ValidationError(f"{self.name}: tile_px must be a positive integer, got {self.tile_px!r}")
        if self.tile_px % TILE_DIVISOR:
            raise ValidationError(
                f"{self.name}: tile_px={self.tile_px} must be divisible by {TILE_DIVISOR}"
            )
        if self.channels != 3:
            raise ValidationError(f"{self.name}: only 3-channel imagery is supported")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gsd_cm": self.gsd_cm,
            "tile_px": self.tile_px,
            "channels": self.channels,
            "band_order": self.band_order,
            "palette": self.palette.to_pairs(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        palette = d.pop("palette", None)
        pal = ClassPalette.from_pairs(palette) if palette is not None else ISPRS_PALETTE
        return cls(palette=pal, **d)

    def with_tile(self, tile_px: int, name: str | None = None, gsd_cm: float | None = None) -> "DomainSpec":
        return dataclasses.replace(
            self,
            tile_px=tile_px,
            name=name or self.name,
            gsd_cm=self.gsd_cm if gsd_cm is None else gsd_cm,
        )


@dataclass(frozen=True)
class ScaleReport:
    h_ratio: float
    r_ratio: float
    rel_error: float
    log_error: float
    passed: bool


def check_scale_compat(src: DomainSpec, tgt: DomainSpec, rel_tol: float = 0.05) -> ScaleReport:
    """Check that tile sizes follow the resolution ratio of the two domains.

    The size ratio ``src.tile_px / tgt.tile_px`` should equal
    ``tgt.gsd_cm / src.gsd_cm``. The pass decision compares log-ratios
    against ``log1p(rel_tol)`` so it is symmetric under swapping domains.
    """
    for d in (src, tgt):
        if d.gsd_cm <= 0 or d.tile_px <= 0:
            raise ValidationError(f"{d.name}: non-positive gsd or tile size")
    if rel_tol < 0:
        raise ValidationError("rel_tol must be non-negative")
    h_ratio = src.tile_px / tgt.tile_px
    r_ratio = tgt.gsd_cm / src.gsd_cm
    rel_error = abs(h_ratio - r_ratio) / r_ratio
    log_error = abs(math.log(h_ratio) - math.log(r_ratio))
    passed = log_error <= math.log1p(rel_tol) + 1e-12
    return ScaleReport(h_ratio, r_ratio, rel_error, log_error, passed)


# ------------------------------------------------------------------ tiling


@dataclass(frozen=True)
class Tile:
    row: int
    col: int
    data: np.ndarray


def tile_origins(height: int, width: int, tile_px: int, stride_px: int) -> list[tuple[int, int]]:
    if stride_px < 1:
        raise ValidationError("stride_px must be >= 1")
    if tile_px < 1:
        raise ValidationError("tile_px must be >= 1")
    if tile_px > min(height, width):
        raise ValidationError(
            f"tile {tile_px}px does not fit in a {height}x{width} raster: no tiles"
        )
    rows = range(0, height - tile_px + 1, stride_px)
    cols = range(0, width - tile_px + 1, stride_px)
    return [(r, c) for r in rows for c in cols]


def tile_raster(raster: np.ndarray, tile_px: int, stride_px: int) -> list[Tile]:
    """Cut ``raster`` into square tiles, row-major, fully inside bounds.

    Tiles that would cross the right or bottom border are dropped, giving
    ``floor((H - tile)/stride + 1) * floor((W - tile)/stride + 1)`` tiles.
    """
    h, w = raster.shape[:2]
    return [
        Tile(r, c, raster[r : r + tile_px, c : c + tile_px].copy())
        for r, c in tile_origins(h, w, tile_px, stride_px)
    ]


# ------------------------------------------------------------------ labels


def _pack_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] < 3:
        raise ValidationError(f"expected an HxWx3 color image, got shape {img.shape}")
    img = img[..., :3].astype(np.int64)
    return (img[..., 0] << 16) | (img[..., 1] << 8) | img[..., 2]


def encode_labels(
    label_image: np.ndarray, palette: ClassPalette, fallback: int | None = None
) -> np.ndarray:
    """Map a color label image to class indices.

    Unknown colors raise unless ``fallback`` names a class index to use.
    """
    keys = _pack_rgb(label_image)
    table = _pack_rgb(palette.colors[None])[0]
    uniq, inverse = np.unique(keys, return_inverse=True)
    lookup = np.full(uniq.shape, -1, dtype=np.int64)
    for idx, key in enumerate(table):
        lookup[uniq == key] = idx
    unknown = uniq[lookup < 0]
    if unknown.size:
        if fallback is None:
            listed = ", ".join(_rgb_to_hex(((k >> 16) & 255, (k >> 8) & 255, k & 255)) for k in unknown[:10])
            raise ValidationError(f"{unknown.size} color(s) not in palette: {listed}")
        if not 0 <= fallback < palette.num_classes:
            raise ValidationError(f"fallback index {fallback} outside palette")
        lookup[lookup < 0] = fallback
    return lookup[inverse].reshape(keys.shape).astype(np.uint8)


def decode_labels(index_map: np.ndarray, palette: ClassPalette) -> np.ndarray:
    index_map = np.asarray(index_map)
    if index_map.size and (index_map.min() < 0 or index_map.max() >= palette.num_classes):
        raise ValidationError("index map holds values outside the palette")
    return palette.colors[index_map]


def _nearest_index(in_px: int, out_px: int) -> np.ndarray:
    # Pixel-center aligned sampling, same as torch "nearest-exact" and PIL NEAREST.
    # Integer form of floor((j + 0.5) * in / out), exact at ties.
    idx = ((2 * np.arange(out_px, dtype=np.int64) + 1) * in_px) // (2 * out_px)
    return np.clip(idx, 0, in_px - 1)


def resize_labels_nearest(index_map: np.ndarray, target_px: int) -> np.ndarray:
    index_map = np.asarray(index_map)
    if index_map.ndim != 2 or index_map.shape[0] != index_map.shape[1]:
        raise ValidationError(f"expected a square index map, got shape {index_map.shape}")
    if target_px <= 0:
        raise ValidationError("target_px must be positive")
    idx = _nearest_index(index_map.shape[0], target_px)
    return index_map[np.ix_(idx, idx)]


def resize_image_array(img: np.ndarray, target_px: int) -> np.ndarray:
    """Bilinear resize of a uint8 HxWx3 image, matching the in-network resizer."""
    from .nets import resize_image

    t = image_to_tensor(img)[None]
    out = resize_image(t, target_px, "bilinear")[0]
    return tensor_to_image(out)


# --------------------------------------------------------------- image I/O


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(path: str | os.PathLike, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")


def image_to_tensor(img: np.ndarray):
    """uint8 HxWx3 -> float32 tensor 3xHxW scaled to [-1, 1]."""
    import torch

    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def tensor_to_image(t) -> np.ndarray:
    """Float tensor 3xHxW in [-1, 1] -> uint8 HxWx3; values are clamped first."""
    arr = t.detach().cpu().clamp(-1, 1).numpy().transpose(1, 2, 0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


# --------------------------------------------------------------- manifests


@dataclass(frozen=True)
class TileRecord:
    image_path: str
    label_path: str | None
    raster_id: str
    row: int
    col: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")


@dataclass
class TileManifest:
    """Tiles of one domain. Relative paths resolve against ``root``."""

    domain: DomainSpec
    tiles: list[TileRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path.cwd)

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self) -> Iterator[TileRecord]:
        return iter(self.tiles)

    @property
    def annotated(self) -> bool:
        return bool(self.tiles) and all(t.label_path is not None for t in self.tiles)

    def validate(self) -> None:
        has = {t.label_path is not None for t in self.tiles}
        if len(has) > 1:
            raise ValidationError("manifest mixes labeled and unlabeled tiles")
        by_split: dict[str, set] = {}
        for t in self.tiles:
            by_split.setdefault(t.split, set()).add(t.image_path)
        names = list(by_split)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                if by_split[a] & by_split[b]:
                    raise ValidationError(f"splits {a!r} and {b!r} share tiles")

    def split(self, *names: str) -> "TileManifest":
        return TileManifest(self.domain, [t for t in self.tiles if t.split in names], self.root)

    def unlabeled(self) -> "TileManifest":
        return TileManifest(
            self.domain, [dataclasses.replace(t, label_path=None) for t in self.tiles], self.root
        )

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_image(self, rec: TileRecord) -> np.ndarray:
        img = load_image(self.resolve(rec.image_path))
        if img.shape[0] != img.shape[1] or img.shape[0] != self.domain.tile_px:
            raise ValidationError(
                f"{rec.image_path}: expected {self.domain.tile_px}px square tile, got {img.shape[:2]}"
            )
        return img

    def load_labels(self, rec: TileRecord, fallback: int | None = None) -> np.ndarray:
        if rec.label_path is None:
            raise ValidationError(f"{rec.image_path}: tile has no label")
        return encode_labels(load_image(self.resolve(rec.label_path)), self.domain.palette, fallback)

    def dump(self, path: str | os.PathLike) -> None:
        """Write the manifest as JSON lines: a domain header, then one record per tile."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"domain": self.domain.to_dict()}, sort_keys=True)]
        lines += [json.dumps(dataclasses.asdict(t), sort_keys=True) for t in self.tiles]
        _atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TileManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValidationError(f"{path}: empty manifest")
        try:
            head = json.loads(lines[0])
            domain = DomainSpec.from_dict(head["domain"])
            tiles = [TileRecord(**json.loads(ln)) for ln in lines[1:]]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: malformed manifest ({exc})") from exc
        m = cls(domain, tiles, path.parent.resolve())
        m.validate()
        return m


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticDomainConfig:
    name: str
    gsd_cm: float
    tile_px: int
    n_tiles: int = 16
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.02
    band_order: str = "RGB"
    val_fraction: float = 0.0
    test_fraction: float = 0.0

    def domain(self) -> DomainSpec:
        return DomainSpec(self.name, self.gsd_cm, self.tile_px, band_order=self.band_order)


# Canonical class colors before the per-domain radiometric transform.
_CLASS_BASE = {
    CLUTTER: (0.55, 0.45, 0.35),
    IMPERVIOUS: (0.62, 0.62, 0.60),
    TREE: (0.15, 0.42, 0.14),
    LOW_VEGETATION: (0.42, 0.62, 0.28),
}
# Roofs and cars draw from one shared paint table: size is what tells them apart.
_ROOF_COLORS = (
    (0.78, 0.30, 0.22),
    (0.30, 0.32, 0.70),
    (0.85, 0.82, 0.78),
    (0.20, 0.20, 0.22),
)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Two-domain synthetic scenes with metric object sizes.

    Densities are expected object counts per 1000 square meters of
    ground; ``road_fraction`` and ``vegetation_fraction`` are area
    fractions of the ground layer.
    """

    source: SyntheticDomainConfig
    target: SyntheticDomainConfig
    car_length_cm: float = 450.0
    car_width_cm: float = 200.0
    building_min_cm: float = 700.0
    building_max_cm: float = 1400.0
    tree_diameter_cm: tuple[float, float] = (300.0, 600.0)
    clutter_size_cm: tuple[float, float] = (60.0, 150.0)
    cars_per_1000m2: float = 8.0
    buildings_per_1000m2: float = 1.5
    trees_per_1000m2: float = 4.0
    clutter_per_1000m2: float = 4.0
    road_fraction: float = 0.3
    vegetation_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.source.gsd_cm <= 0 or self.target.gsd_cm <= 0:
            raise ValidationError("gsd must be positive")
        for d in (self.source, self.target):
            d.domain()  # validates tile size
            if d.n_tiles < 0:
                raise ValidationError("n_tiles must be >= 0")
            if not 0 <= d.val_fraction + d.test_fraction <= 1:
                raise ValidationError("val+test fraction must lie in [0, 1]")
            biggest = max(
                self.car_length_cm, self.building_max_cm, self.tree_diameter_cm[1], self.clutter_size_cm[1]
            )
            if round(biggest / d.gsd_cm) > d.tile_px:
                raise ValidationError(
                    f"{d.name}: objects up to {biggest} cm span {round(biggest / d.gsd_cm)} px, larger than the {d.tile_px}px tile"
                )
        for name in ("cars_per_1000m2", "buildings_per_1000m2", "trees_per_1000m2", "clutter_per_1000m2"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not (0 <= self.road_fraction <= 1 and 0 <= self.vegetation_fraction <= 1):
            raise ValidationError("area fractions must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        d = dict(d)
        try:
            src = SyntheticDomainConfig(**_tuplify(d.pop("source")))
            tgt = SyntheticDomainConfig(**_tuplify(d.pop("target")))
            return cls(source=src, target=tgt, **_tuplify(d))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"invalid synthetic scene config: {exc}") from exc


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _px(cm: float, gsd: float) -> int:
    return max(1, int(round(cm / gsd)))


def _smooth_field(rng: np.random.Generator, size: int, cell_px: float) -> np.ndarray:
    """Value noise: coarse uniform grid upsampled bilinearly to ``size``."""
    n = max(2, int(math.ceil(size / max(cell_px, 1.0))) + 1)
    grid = rng.random((n, n))
    pos = np.linspace(0, n - 1, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_scene(
    cfg: SyntheticSceneConfig, dom: SyntheticDomainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Render one tile. Returns ``(image uint8 HxWx3, labels uint8 HxW)``."""
    size, gsd = dom.tile_px, dom.gsd_cm
    area_1000m2 = (size * gsd / 100.0) ** 2 / 1000.0
    labels = np.full((size, size), CLUTTER, dtype=np.uint8)
    base = np.zeros((size, size, 3), dtype=np.float64)
    base[:] = _CLASS_BASE[CLUTTER]
    # Per-pixel texture amplitude; vegetation is the most textured class.
    texture = np.full((size, size), 0.03)

    if cfg.road_fraction > 0:
        road = _smooth_field(rng, size, _px(1500, gsd)) < cfg.road_fraction
        labels[road] = IMPERVIOUS
        base[road] = _CLASS_BASE[IMPERVIOUS]
        texture[road] = 0.02
    if cfg.vegetation_fraction > 0:
        veg = (_smooth_field(rng, size, _px(800, gsd)) < cfg.vegetation_fraction) & (labels == CLUTTER)
        labels[veg] = LOW_VEGETATION
        base[veg] = _CLASS_BASE[LOW_VEGETATION]
        texture[veg] = 0.10

    def count(density: float) -> int:
        return int(rng.poisson(density * area_1000m2)) if density > 0 else 0

    for _ in range(count(cfg.buildings_per_1000m2)):
        h = _px(rng.uniform(cfg.building_min_cm, cfg.building_max_cm), gsd)
        w = _px(rng.uniform(cfg.building_min_cm, cfg.building_max_cm), gsd)
        h, w = min(h, size), min(w, size)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        labels[r : r + h, c : c + w] = BUILDING
        base[r : r + h, c : c + w] = _ROOF_COLORS[rng.integers(len(_ROOF_COLORS))]
        texture[r : r + h, c : c + w] = 0.02

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(count(cfg.trees_per_1000m2)):
        rad = _px(rng.uniform(*cfg.tree_diameter_cm), gsd) / 2.0
        cy, cx = rng.uniform(0, size, 2)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        labels[disc] = TREE
        base[disc] = _CLASS_BASE[TREE]
        texture[disc] = 0.08

    for _ in range(count(cfg.clutter_per_1000m2)):
        s = _px(rng.uniform(*cfg.clutter_size_cm), gsd)
        r, c = rng.integers(0, size - s + 1), rng.integers(0, size - s + 1)
        labels[r : r + s, c : c + s] = CLUTTER
        base[r : r + s, c : c + s] = _CLASS_BASE[CLUTTER]

    # Cars go last and never overlap each other, so their footprint is exact.
    car_l, car_w = _px(cfg.car_length_cm, gsd), _px(cfg.car_width_cm, gsd)
    n_cars = count(cfg.cars_per_1000m2)
    placed = 0
    for _ in range(n_cars * 20):
        if placed == n_cars:
            break
        h, w = (car_l, car_w) if rng.random() < 0.5 else (car_w, car_l)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        r0, r1, c0, c1 = max(r - 1, 0), min(r + h + 1, size), max(c - 1, 0), min(c + w + 1, size)
        if (labels[r0:r1, c0:c1] == CAR).any():
            continue
        labels[r : r + h, c : c + w] = CAR
        base[r : r + h, c : c + w] = _ROOF_COLORS[rng.integers(len(_ROOF_COLORS))]
        texture[r : r + h, c : c + w] = 0.02
        placed += 1

    noise = rng.standard_normal((size, size, 3))
    img = base + texture[..., None] * rng.standard_normal((size, size, 1)) + dom.noise_sigma * noise
    img = img * np.asarray(dom.gain) + np.asarray(dom.offset)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img, labels


def _split_for(i: int, n: int, dom: SyntheticDomainConfig) -> str:
    n_test = int(round(n * dom.test_fraction))
    n_val = int(round(n * dom.val_fraction))
    if i >= n - n_test:
        return "test"
    if i >= n - n_test - n_val:
        return "val"
    return "train"


def generate_synthetic_pair(
    cfg: SyntheticSceneConfig, out_dir: str | os.PathLike
) -> tuple[TileManifest, TileManifest]:
    """Render source and target tiles under ``out_dir`` and write both manifests.

    Output is a deterministic function of ``cfg`` (including its seed).
    """
    out_dir = Path(out_dir)
    manifests = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    for dom, ss in zip((cfg.source, cfg.target), seeds):
        rng = np.random.default_rng(ss)
        spec = dom.domain()
        droot = out_dir / dom.name
        records = []
        for i in range(dom.n_tiles):
            img, lab = render_scene(cfg, dom, rng)
            img_rel = f"images/{dom.name}_{i:04d}.png"
            lab_rel = f"labels/{dom.name}_{i:04d}.png"
            save_image(droot / img_rel, img)
            save_image(droot / lab_rel, decode_labels(lab, spec.palette))
            records.append(TileRecord(img_rel, lab_rel, f"{dom.name}_{i:04d}", 0, 0, _split_for(i, dom.n_tiles, dom)))
        m = TileManifest(spec, records, droot.resolve())
        m.dump(droot / "manifest.jsonl")
        manifests.append(m)
    return manifests[0], manifests[1]


def center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if size > min(h, w):
        raise ValidationError(f"cannot crop {size}px from a {h}x{w} array")
    r, c = (h - size) // 2, (w - size) // 2
    return arr[r : r + size, c : c + size]


class TileStore:
    """Random access to a manifest's images (and labels) as tensors.

    ``transform`` maps ``(image, labels_or_None)`` arrays before tensor
    conversion. Decoded arrays are cached in memory up to ``cache_bytes``.
    """

    def __init__(self, manifest: TileManifest, with_labels: bool = False, transform=None,
                 cache_bytes: int = 1 << 29, label_fallback: int | None = None):
        if with_labels and len(manifest) and not manifest.annotated:
            raise ValidationError(f"manifest for {manifest.domain.name!r} has no labels")
        self.manifest = manifest
        self.with_labels = with_labels
        self.transform = transform
        self.label_fallback = label_fallback
        per_tile = manifest.domain.tile_px**2 * 4
        self._cache: dict[int, tuple] | None = {} if per_tile * len(manifest) <= cache_bytes else None

    def __len__(self) -> int:
        return len(self.manifest)

    def arrays(self, i: int) -> tuple[np.ndarray, np.ndarray | None]:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        rec = self.manifest.tiles[i]
        img = self.manifest.load_image(rec)
        lab = self.manifest.load_labels(rec, self.label_fallback) if self.with_labels else None
        if self.transform is not None:
            img, lab = self.transform(img, lab)
        if self._cache is not None:
            self._cache[i] = (img, lab)
        return img, lab

    def batch(self, indices):
        import torch

        imgs, labs = [], []
        for i in indices:
            img, lab = self.arrays(int(i))
            imgs.append(image_to_tensor(img))
            if lab is not None:
                labs.append(torch.from_numpy(lab.astype(np.int64)))
        x = torch.stack(imgs)
        return (x, torch.stack(labs)) if self.with_labels else x
