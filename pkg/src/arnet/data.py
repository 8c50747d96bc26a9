"""Netpbm codecs, dataset directory layout and the synthetic low-contrast generator.

Layout of a dataset root::

    <root>/image/<stem>.ppm
    <root>/mask/<stem>.pgm
    <root>/manifest.txt        # "stem, seed, delta" per line (synthetic sets)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import resize_array

MAXVAL = 255
MASK_THRESHOLD = 128
_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}
_WS = b" \t\r\n\v\f"


class NetpbmError(ValueError):
    """Malformed or unsupported netpbm data; messages carry the file and byte offset."""


def _tokens(buf: bytes, pos: int, count: int, where: str):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise NetpbmError(f"{where}: header truncated at byte {pos}")
        start = pos
        while pos < n and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise NetpbmError(f"{where}: expected an unsigned integer at byte {start}, found {tok[:16]!r}")
        out.append((int(tok), start))
    return out, pos


def decode_netpbm(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    """Decode P2/P3/P5/P6 to a uint8 array of shape (H, W) or (H, W, 3)."""
    magic = buf[:2]
    if magic not in _MAGIC:
        raise NetpbmError(f"{where}: unsupported magic {magic!r} at byte 0 (expected P2, P3, P5 or P6)")
    channels, binary = _MAGIC[magic]
    ((w, _), (h, _), (maxval, mpos)), pos = _tokens(buf, 2, 3, where)
    if w == 0 or h == 0:
        raise NetpbmError(f"{where}: zero image dimension {w}x{h}")
    if maxval != MAXVAL:
        raise NetpbmError(f"{where}: unsupported maxval {maxval} at byte {mpos} (only {MAXVAL} is supported)")
    expected = w * h * channels
    if binary:
        if pos >= len(buf) or buf[pos] not in _WS:
            raise NetpbmError(f"{where}: missing whitespace after header at byte {pos}")
        data = buf[pos + 1:]
        if len(data) < expected:
            raise NetpbmError(f"{where}: truncated payload: expected {expected} bytes, got {len(data)}")
        arr = np.frombuffer(data, dtype=np.uint8, count=expected)
    else:
        parts = buf[pos:].split()
        if len(parts) < expected:
            raise NetpbmError(f"{where}: truncated payload: expected {expected} samples, got {len(parts)}")
        try:
            vals = np.array([int(p) for p in parts[:expected]], dtype=np.int64)
        except ValueError as exc:
            raise NetpbmError(f"{where}: non-integer sample in ASCII payload after byte {pos}") from exc
        if vals.max(initial=0) > maxval:
            raise NetpbmError(f"{where}: sample value {vals.max()} exceeds maxval {maxval}")
        arr = vals.astype(np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape).copy()


def encode_netpbm(arr: np.ndarray, binary: bool = True) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"netpbm encoding needs uint8 samples, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5" if binary else b"P2"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6" if binary else b"P3"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n{MAXVAL}\n".encode()
    if binary:
        return header + arr.tobytes()
    rows = [" ".join(str(v) for v in row) for row in arr.reshape(h, -1)]
    return header + ("\n".join(rows) + "\n").encode()


def read_netpbm(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes(), str(path))


def write_netpbm(path, arr: np.ndarray, binary: bool = True):
    Path(path).write_bytes(encode_netpbm(arr, binary))


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # optional dependency
        raise NetpbmError(f"{path}: PNG support needs Pillow (pip install 'artifact[png]')") from exc
    with Image.open(path) as im:
        im = im.convert("RGB" if im.mode in ("RGB", "RGBA", "P") else "L")
        return np.asarray(im, dtype=np.uint8)


def read_raw(path) -> np.ndarray:
    """uint8 samples of a PGM/PPM (or PNG when Pillow is installed)."""
    if str(path).lower().endswith(".png"):
        return _read_png(path)
    return read_netpbm(path)


def load_image(path) -> np.ndarray:
    """RGB image as float64 (3, H, W) in [0, 1]; grayscale files are replicated."""
    raw = read_raw(path).astype(np.float64) / MAXVAL
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return np.ascontiguousarray(raw.transpose(2, 0, 1))


def load_map(path) -> np.ndarray:
    """Single-channel map as float64 (H, W) in [0, 1]; colour files are averaged."""
    raw = read_raw(path).astype(np.float64)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    return raw / MAXVAL


def load_mask(path) -> np.ndarray:
    """Binary mask (H, W) of float64 0/1, thresholded at 128 on the 8-bit scale."""
    raw = read_raw(path)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    return (raw >= MASK_THRESHOLD).astype(np.float64)


def quantize(p: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0) * MAXVAL).astype(np.uint8)


def save_mask(path, p: np.ndarray, binary: bool = True):
    """Write a [0, 1] map as 8-bit PGM, ``round(p * 255)``."""
    p = np.asarray(p)
    if p.ndim != 2:
        p = p.reshape(p.shape[-2:])
    write_netpbm(path, quantize(p), binary)


def save_image(path, img: np.ndarray, binary: bool = True):
    """Write a (3, H, W) [0, 1] image as 8-bit PPM."""
    write_netpbm(path, quantize(np.asarray(img).transpose(1, 2, 0)), binary)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthConfig:
    count: int = 8
    size: int = 64
    delta: float = 0.08
    grain: int = 3
    shape: str = "ellipse"
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.size < 32 or self.size % 32:
            raise ValueError(f"size must be a positive multiple of 32, got {self.size}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.grain < 1:
            raise ValueError(f"grain must be >= 1, got {self.grain}")
        if self.shape not in ("ellipse", "blob"):
            raise ValueError(f"shape must be 'ellipse' or 'blob', got {self.shape!r}")


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def value_noise(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, halving amplitude per octave; in [0, 1]."""
    out = np.zeros((size, size))
    total = 0.0
    for o in range(octaves):
        cells = 4 * 2 ** o
        lattice = rng.random((cells + 1, cells + 1))
        amp = 0.5 ** o
        out += amp * resize_array(lattice, (size, size))
        total += amp
    return out / total


def _pixel_grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def rasterize_ellipse(size, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = _pixel_grid(size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def rasterize_blob(size, cy, cx, r0, amps, phases) -> np.ndarray:
    yy, xx = _pixel_grid(size)
    dy, dx = yy - cy, xx - cx
    ang = np.arctan2(dy, dx)
    r = np.full_like(ang, r0)
    for k, (a, ph) in enumerate(zip(amps, phases), start=2):
        r += r0 * a * np.cos(k * ang + ph)
    return np.hypot(dy, dx) <= r


def random_shape(rng: np.random.Generator, size: int, family: str) -> np.ndarray:
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    if family == "ellipse":
        ry, rx = rng.uniform(0.15, 0.3, 2) * size
        mask = rasterize_ellipse(size, cy, cx, ry, rx, rng.uniform(0, np.pi))
    else:
        r0 = rng.uniform(0.18, 0.28) * size
        mask = rasterize_blob(size, cy, cx, r0, rng.uniform(0.0, 0.15, 3), rng.uniform(0, 2 * np.pi, 3))
    return mask


def synth_sample(cfg: SynthConfig, seed: int):
    """One (image (3,S,S), mask (S,S) bool) pair.

    The object carries the background's texture shifted by ``delta``; the
    texture is de-meaned separately inside and outside the shape, so the
    mean offset is exactly ``delta`` before 8-bit quantization.
    """
    rng = np.random.default_rng(seed)
    mask = random_shape(rng, cfg.size, cfg.shape)
    amp = min(0.25, (1.0 - cfg.delta) / 2)
    base = (1.0 - cfg.delta) / 2
    img = np.empty((3, cfg.size, cfg.size))
    for c in range(3):
        z = value_noise(rng, cfg.size, cfg.grain)
        t = np.empty_like(z)
        t[mask] = z[mask] - z[mask].mean()
        t[~mask] = z[~mask] - z[~mask].mean()
        img[c] = base + amp * t + cfg.delta * mask
    return np.clip(img, 0.0, 1.0), mask


def synthesize(cfg: SynthConfig, root) -> list[str]:
    """Write ``cfg.count`` samples under ``root``; returns the stems."""
    root = Path(root)
    (root / "image").mkdir(parents=True, exist_ok=True)
    (root / "mask").mkdir(parents=True, exist_ok=True)
    stems, lines = [], []
    for i in range(cfg.count):
        stem = f"synth_{i:04d}"
        s = sample_seed(cfg.seed, i)
        img, mask = synth_sample(cfg, s)
        save_image(root / "image" / f"{stem}.ppm", img)
        save_mask(root / "mask" / f"{stem}.pgm", mask.astype(np.float64))
        stems.append(stem)
        lines.append(f"{stem}, {s}, {cfg.delta!r}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return stems


# ---------------------------------------------------------------------------
# datasets

IMAGE_EXTS = (".ppm", ".pgm", ".pnm", ".png")


class DatasetError(ValueError):
    pass


def _index(d: Path) -> dict:
    if not d.is_dir():
        raise DatasetError(f"missing directory {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


class Dataset:
    """Image/mask pairs matched by stem, loaded on first access and cached."""

    def __init__(self, root, size: Optional[int] = None):
        self.root = Path(root)
        images = _index(self.root / "image")
        masks = _index(self.root / "mask")
        no_mask = sorted(set(images) - set(masks))
        no_image = sorted(set(masks) - set(images))
        if no_mask or no_image:
            msg = []
            if no_mask:
                msg.append("images without mask: " + ", ".join(no_mask))
            if no_image:
                msg.append("masks without image: " + ", ".join(no_image))
            raise DatasetError(f"{self.root}: unmatched stems; " + "; ".join(msg))
        if not images:
            raise DatasetError(f"{self.root}: dataset is empty")
        self.stems = sorted(images)
        self.image_paths = images
        self.mask_paths = masks
        self.size = size
        self._cache: dict = {}

    def __len__(self):
        return len(self.stems)

    def sample(self, i: int):
        stem = self.stems[i]
        if stem not in self._cache:
            img = load_image(self.image_paths[stem])
            mask = load_mask(self.mask_paths[stem])
            if img.shape[1:] != mask.shape:
                raise DatasetError(f"{stem}: image {img.shape[1:]} and mask {mask.shape} sizes differ")
            if self.size is not None and img.shape[1:] != (self.size, self.size):
                hw = (self.size, self.size)
                img = np.stack([resize_array(c, hw) for c in img])
                mask = (resize_array(mask, hw) >= 0.5).astype(np.float64)
            img.setflags(write=False)
            mask.setflags(write=False)
            self._cache[stem] = (img, mask)
        return self._cache[stem]


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)


def dataset_iter(data, batch: int, shuffle_seed: Optional[int] = 0, epoch: int = 0,
                 dtype=np.float64) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    """Yield ``(images (n,3,H,W), masks (n,1,H,W), stems)``; the last batch may be short."""
    ds = data if isinstance(data, Dataset) else Dataset(data)
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    order = epoch_order(len(ds), shuffle_seed, epoch)
    for lo in range(0, len(order), batch):
        idx = order[lo:lo + batch]
        pairs = [ds.sample(int(i)) for i in idx]
        images = np.stack([p[0] for p in pairs]).astype(dtype)
        masks = np.stack([p[1] for p in pairs])[:, None].astype(dtype)
        yield images, masks, [ds.stems[int(i)] for i in idx]


def read_manifest(root) -> list[tuple[str, int, float]]:
    rows = []
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if line.strip():
            stem, seed, delta = (s.strip() for s in line.split(","))
            rows.append((stem, int(seed), float(delta)))
    return rows


def list_images(paths) -> list[Path]:
    """Expand directories into their image files (sorted); keep plain files as given."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += [q for q in sorted(p.iterdir()) if q.suffix.lower() in IMAGE_EXTS]
        else:
            out.append(p)
    return out

