"""Image I/O, tiling, slide-level splits, manifests, and a synthetic tissue generator."""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
TILE_SIZE = 224


class DataError(ValueError):
    """Unreadable, truncated or unsupported input data."""


class LeakageError(RuntimeError):
    """A slide contributes tiles to both sides of a split."""


# ---------------------------------------------------------------- I/O


def _read_png(data: bytes, path) -> np.ndarray:
    if len(data) < 33 or data[12:16] != b"IHDR":
        raise DataError(f"{path}: truncated PNG header")
    depth = data[24]
    if depth != 8:
        raise DataError(f"{path}: unsupported PNG bit depth {depth}; only 8-bit images are supported")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise DataError("truncated PPM header")
        tokens.append(data[start:i])
    return tokens, i + 1  # exactly one whitespace byte ends the header


def _read_ppm(data: bytes, path) -> np.ndarray:
    (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    if magic != b"P6":
        raise DataError(f"{path}: only binary P6 PPM is supported, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: unsupported PPM maxval {maxval}; only 8-bit images are supported")
    need = w * h * 3
    if len(data) - offset < need:
        raise DataError(f"{path}: truncated PPM data ({len(data) - offset} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=offset).reshape(h, w, 3)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG or P6 PPM as a float32 (1, 3, H, W) array in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(PNG_SIGNATURE):
        hwc = _read_png(data, path)
    elif data[:2] == b"P6" or path.suffix.lower() in (".ppm", ".pnm"):
        hwc = _read_ppm(data, path)
    else:
        raise DataError(f"{path}: unsupported image format (PNG or P6 PPM expected)")
    return (np.moveaxis(hwc, -1, 0)[None].astype(np.float32) / 255.0).astype(np.float32)


def to_uint8(image) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) floats in [0, 1] to (H, W, 3) uint8, rounding half up."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DataError("can only save one image at a time")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected a 3-channel image, got shape {arr.shape}")
    return np.moveaxis(np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8), 0, -1)


def save_image(image, path: str | os.PathLike) -> None:
    path = Path(path)
    hwc = np.ascontiguousarray(to_uint8(image))
    suffix = path.suffix.lower()
    if suffix == ".png":
        Image.fromarray(hwc, "RGB").save(path, format="PNG")
    elif suffix in (".ppm", ".pnm"):
        h, w, _ = hwc.shape
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + hwc.tobytes())
    else:
        raise DataError(f"{path}: unsupported output format {suffix!r}")


# ---------------------------------------------------------------- tiling


def tile_coords(height: int, width: int, tile_size: int = TILE_SIZE, stride: int | None = None) -> list[tuple]:
    """Raster-order top-left corners of every tile that fits entirely inside the image."""
    stride = tile_size if stride is None else stride
    if tile_size < 1 or stride < 1:
        raise ValueError("tile size and stride must be positive")
    if tile_size > min(height, width):
        raise ValueError(f"tile size {tile_size} exceeds image {height}x{width}")
    return [(y, x) for y in range(0, height - tile_size + 1, stride)
            for x in range(0, width - tile_size + 1, stride)]


def tile_image(image, tile_size: int = TILE_SIZE, stride: int | None = None) -> list[np.ndarray]:
    """Cut a (1, 3, H, W) or (3, H, W) image into (3, s, s) tiles in raster order; partial edge tiles are dropped."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    h, w = arr.shape[-2:]
    return [arr[:, y:y + tile_size, x:x + tile_size] for y, x in tile_coords(h, w, tile_size, stride)]


# ---------------------------------------------------------------- slides and splits


@dataclass(frozen=True)
class TileRef:
    slide_id: str
    path: str
    y: int
    x: int
    size: int


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    path: str
    height: int
    width: int
    tile_size: int = TILE_SIZE
    stride: int | None = None
    tiles: tuple | None = None

    def __post_init__(self):
        if self.tiles is None:
            coords = tile_coords(self.height, self.width, self.tile_size, self.stride)
            object.__setattr__(self, "tiles", tuple(coords))
        for y, x in self.tiles:
            if y < 0 or x < 0 or y + self.tile_size > self.height or x + self.tile_size > self.width:
                raise ValueError(f"tile at ({y}, {x}) leaves slide {self.slide_id}")

    def tile_refs(self) -> list[TileRef]:
        return [TileRef(self.slide_id, self.path, y, x, self.tile_size) for y, x in self.tiles]

    def to_json(self) -> dict:
        d = asdict(self)
        d["tiles"] = [list(t) for t in self.tiles]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SlideRecord":
        d = dict(d)
        d["tiles"] = tuple(tuple(t) for t in d.get("tiles", ())) or None
        return cls(**d)


@dataclass(frozen=True)
class TileSet:
    split: str
    tiles: tuple  # of TileRef

    @property
    def slide_ids(self) -> frozenset:
        return frozenset(t.slide_id for t in self.tiles)

    def __len__(self) -> int:
        return len(self.tiles)


def _slide_rank(seed: int, slide_id: str) -> str:
    return hashlib.sha256(f"{seed}:{slide_id}".encode()).hexdigest()


def split_slides(records, test_fraction: float = 0.2, seed: int = 0) -> tuple[TileSet, TileSet]:
    """Assign whole slides to train or test by a seeded hash of the slide id.

    The test side gets round(test_fraction * n_slides) slides, at least one
    and leaving at least one for training.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    ids = sorted({r.slide_id for r in records}, key=lambda s: _slide_rank(seed, s))
    if len(ids) < 2:
        raise DataError("need at least two distinct slides to split")
    n_test = min(max(int(round(test_fraction * len(ids))), 1), len(ids) - 1)
    test_ids = set(ids[:n_test])
    train, test = [], []
    for r in records:
        (test if r.slide_id in test_ids else train).extend(r.tile_refs())
    out = TileSet("train", tuple(train)), TileSet("test", tuple(test))
    check_no_leakage(*out)
    return out


def check_no_leakage(train: TileSet, test: TileSet) -> None:
    shared = train.slide_ids & test.slide_ids
    if shared:
        raise LeakageError(f"slides in both splits: {sorted(shared)}")


# ---------------------------------------------------------------- manifests


def write_manifest(records, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[SlideRecord]:
    with open(path) as fh:
        return [SlideRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_tileset(tileset: TileSet, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for t in tileset.tiles:
            fh.write(json.dumps({"split": tileset.split, **asdict(t)}, sort_keys=True) + "\n")


def read_tileset(path: str | os.PathLike) -> TileSet:
    splits, tiles = set(), []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                splits.add(d.pop("split"))
                tiles.append(TileRef(**d))
    if len(splits) > 1:
        raise DataError(f"{path}: tiles from several splits {sorted(splits)}")
    return TileSet(splits.pop() if splits else "unknown", tuple(tiles))


def load_tiles(tiles, limit: int | None = None) -> np.ndarray:
    """Pixels of ``tiles`` as a float32 (N, 3, s, s) array, reading each source image once."""
    tiles = list(tiles)[:limit]
    cache: dict[str, np.ndarray] = {}
    out = []
    for t in tiles:
        if t.path not in cache:
            cache[t.path] = load_image(t.path)[0]
        out.append(cache[t.path][:, t.y:t.y + t.size, t.x:t.x + t.size])
    if not out:
        raise DataError("no tiles to load")
    return np.stack(out).astype(np.float32)


def scan_images(directory: str | os.PathLike, tile_size: int = TILE_SIZE, stride: int | None = None) -> list[SlideRecord]:
    """One record per PNG/PPM under ``directory``; the file stem is the slide id."""
    records = []
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in (".png", ".ppm", ".pnm"):
            img = load_image(p)
            _, _, h, w = img.shape
            if min(h, w) >= tile_size:
                records.append(SlideRecord(p.stem, str(p), h, w, tile_size, stride))
    return records


# ---------------------------------------------------------------- synthetic tissue


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: float) -> np.ndarray:
    """Bilinearly interpolated uniform noise with feature size ``cell`` pixels, in [0, 1]."""
    gh, gw = int(h / cell) + 2, int(w / cell) + 2
    grid = rng.uniform(size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    rows = np.stack([np.interp(xs, np.arange(gw), g) for g in grid])
    return np.stack([np.interp(ys, np.arange(gh), rows[:, j]) for j in range(w)], axis=1)


def synthetic_tissue(seed: int, height: int = TILE_SIZE, width: int = TILE_SIZE) -> np.ndarray:
    """A stained-tissue-like RGB image (3, H, W) on the 8-bit grid in [0, 1].

    Pink stroma with fibrous texture, pale lumen regions and dark purple
    nuclei; deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    h, w = height, width
    density = 0.6 * _smooth_noise(rng, h, w, 40) + 0.3 * _smooth_noise(rng, h, w, 9) + 0.1 * _smooth_noise(rng, h, w, 3)
    light = np.array([0.96, 0.80, 0.90])
    dark = np.array([0.80, 0.42, 0.62])
    img = light[:, None, None] + (dark - light)[:, None, None] * density[None]
    lumen = np.clip((_smooth_noise(rng, h, w, 60) - 0.72) * 8, 0, 1)
    img = img * (1 - lumen) + np.array([0.97, 0.95, 0.97])[:, None, None] * lumen

    nucleus = np.array([0.30, 0.18, 0.50])
    yy, xx = np.mgrid[0:h, 0:w]
    n_nuclei = rng.poisson(h * w / 900)
    for _ in range(n_nuclei):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(3, 8), rng.uniform(2.5, 5)
        th = rng.uniform(0, np.pi)
        y0, y1 = max(int(cy - 10), 0), min(int(cy + 11), h)
        x0, x1 = max(int(cx - 10), 0), min(int(cx + 11), w)
        if y0 >= y1 or x0 >= x1:
            continue
        dy, dx = yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / a
        v = (-dx * np.sin(th) + dy * np.cos(th)) / b
        mask = np.clip(1.0 - (u * u + v * v), 0, 1) ** 0.35 * (1 - lumen[y0:y1, x0:x1])
        shade = nucleus[:, None, None] * (0.85 + 0.3 * rng.uniform(size=(1, y1 - y0, x1 - x0)))
        patch = img[:, y0:y1, x0:x1]
        img[:, y0:y1, x0:x1] = patch * (1 - mask) + shade * mask
    img = img + rng.normal(scale=0.015, size=img.shape)
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5) / 255


def write_synthetic_corpus(directory: str | os.PathLike, n_slides: int, height: int, width: int,
                           seed: int = 0, fmt: str = "png") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_slides):
        p = directory / f"slide{i:03d}.{fmt}"
        save_image(synthetic_tissue(seed * 100003 + i, height, width), p)
        paths.append(p)
    return paths
