"""Seeded synthetic datasets with ground truth, plus image preprocessing.

The tabular generator produces low-rank correlated feature vectors (a fixed
random linear map of a small latent cube, squashed through a logistic), so
an autoencoder can learn the structure and corruptions of one feature are
visible through the others.  The image generator draws textured objects on
a dark background and injects damage with an exact pixel mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 21
LATENT_DIM = 6
DAMAGE_KINDS = ("blob", "scratch", "misplace")


@dataclass
class TabularDataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    latent_dim: int = LATENT_DIM


@dataclass
class ImageDataset:
    train: np.ndarray  # (n, H, W) clean
    val: np.ndarray
    test: dict = field(default_factory=dict)  # damage kind -> (n, H, W)
    masks: dict = field(default_factory=dict)  # damage kind -> (n, H, W) binary
    seed: int = 0
    size: int = 64


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def gen_tabular(seed: int, n_train: int = 50000, n_val: int = 5000, n_test: int = 10000,
                n_features: int = N_FEATURES, latent_dim: int = LATENT_DIM) -> TabularDataset:
    """Feature vectors x = logistic(A z + b) with z uniform on (-1, 1)^d."""
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.2, size=(n_features, latent_dim))
    b = rng.normal(0.0, 0.3, size=n_features)

    def draw(n):
        z = rng.uniform(-1.0, 1.0, size=(n, latent_dim))
        return _logistic(z @ A.T + b)

    return TabularDataset(draw(n_train), draw(n_val), draw(n_test), seed, latent_dim)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def _smooth_noise(rng, size, cells=8, amplitude=0.15):
    grid = rng.uniform(-amplitude, amplitude, size=(cells, cells))
    return _bilinear_resize(grid, size, size)


def _clean_image(rng, size):
    img = 0.05 + rng.uniform(0.0, 0.02, size=(size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    cy = size / 2 + rng.uniform(-size * 0.05, size * 0.05)
    cx = size / 2 + rng.uniform(-size * 0.05, size * 0.05)
    radius = size * rng.uniform(0.28, 0.34)
    obj = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    texture = 0.6 + _smooth_noise(rng, size)
    img[obj] = texture[obj]
    return np.clip(img, 0.0, 1.0), obj, (cy, cx, radius)


def _inject_damage(rng, img, obj_geom, kind):
    size = img.shape[0]
    cy, cx, radius = obj_geom
    out = np.array(img)
    mask = np.zeros_like(img, dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "blob":
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, radius * 0.6)
        by, bx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
        br = size * rng.uniform(0.05, 0.09)
        mask = (yy - by) ** 2 + (xx - bx) ** 2 <= br**2
        shift = rng.choice([-0.4, 0.4])
        out[mask] = np.clip(out[mask] + shift, 0.0, 1.0)
    elif kind == "scratch":
        ang = rng.uniform(0, np.pi)
        half = radius * rng.uniform(0.6, 0.9)
        thickness = max(1.5, size * 0.02)
        d_along = (yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
        d_perp = (yy - cy) * np.cos(ang) - (xx - cx) * np.sin(ang)
        mask = (np.abs(d_perp) <= thickness) & (np.abs(d_along) <= half)
        out[mask] = np.clip(out[mask] - 0.45, 0.0, 1.0)
    elif kind == "misplace":
        side = int(size * rng.uniform(0.12, 0.2))
        sy = int(cy - radius * 0.5 + rng.uniform(0, radius * 0.5))
        sx = int(cx - radius * 0.5 + rng.uniform(0, radius * 0.5))
        dy = int(sy + rng.choice([-1, 1]) * size * rng.uniform(0.12, 0.2))
        dx = int(sx + rng.choice([-1, 1]) * size * rng.uniform(0.12, 0.2))
        sy, sx = np.clip(sy, 0, size - side), np.clip(sx, 0, size - side)
        dy, dx = np.clip(dy, 0, size - side), np.clip(dx, 0, size - side)
        patch = img[sy : sy + side, sx : sx + side]
        out[dy : dy + side, dx : dx + side] = patch
        changed = np.zeros_like(mask)
        changed[dy : dy + side, dx : dx + side] = True
        mask = changed & (out != img)
        # keep the whole destination rectangle as the mask when it changed at all
        if mask.any():
            mask = changed
    else:
        raise ValueError(f"unknown damage kind {kind!r}")
    return out, mask


def gen_images(seed: int, size: int = 64, n_train: int = 200, n_val: int = 20,
               n_test_per_kind: int = 20, kinds=DAMAGE_KINDS) -> ImageDataset:
    """Clean textured objects plus damaged test images with exact masks."""
    if size not in (64, 128):
        raise ValueError("size must be 64 or 128")

    def make_clean(tag_code, n):
        imgs = []
        for i in range(n):
            rng = np.random.default_rng([seed, tag_code, i])
            imgs.append(_clean_image(rng, size)[0])
        return np.stack(imgs)

    ds = ImageDataset(make_clean(1, n_train), make_clean(2, n_val),
                      seed=seed, size=size)
    for k_idx, kind in enumerate(kinds):
        imgs, masks = [], []
        for i in range(n_test_per_kind):
            rng = np.random.default_rng([seed, 7000 + k_idx, i])
            clean, _, geom = _clean_image(rng, size)
            damaged, mask = _inject_damage(rng, clean, geom, kind)
            while not mask.any():  # resample degenerate draws
                damaged, mask = _inject_damage(rng, clean, geom, kind)
            imgs.append(damaged)
            masks.append(mask.astype(np.float64))
        ds.test[kind] = np.stack(imgs)
        ds.masks[kind] = np.stack(masks)
    return ds


def gaussian_kernel_3x3(sigma: float = 0.5) -> np.ndarray:
    """Separable 3x3 Gaussian filter, normalized to sum 1."""
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _bilinear_resize(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    h, w = img.shape
    ys = np.clip((np.arange(h_out) + 0.5) * h / h_out - 0.5, 0, h - 1)
    xs = np.clip((np.arange(w_out) + 0.5) * w / w_out - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(img: np.ndarray, target_size: int = 128) -> np.ndarray:
    """Grayscale -> 3x3 Gaussian blur (sigma 0.5) -> bilinear resize -> [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    k = gaussian_kernel_3x3()
    padded = np.pad(img, 1, mode="edge")
    blurred = np.zeros_like(img)
    for u in range(3):
        for v in range(3):
            blurred += k[u, v] * padded[u : u + img.shape[0], v : v + img.shape[1]]
    resized = _bilinear_resize(blurred, target_size, target_size)
    lo, hi = resized.min(), resized.max()
    if hi > 1.0 or lo < 0.0:
        resized = np.clip(resized, 0.0, None)
        if resized.max() > 1.0:
            resized = resized / resized.max()
    return resized


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random right-angle rotation composed with random horizontal/vertical flips."""
    out = np.rot90(img, k=int(rng.integers(4)))
    if rng.random() < 0.5:
        out = np.fliplr(out)
    if rng.random() < 0.5:
        out = np.flipud(out)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# persistence: manifest JSON-ish text file + little-endian f32 blobs + PGM
# ---------------------------------------------------------------------------


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64).reshape(shape)


def save_tabular(ds: TabularDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "tabular",
        "seed": ds.seed,
        "latent_dim": ds.latent_dim,
        "n_features": int(ds.train.shape[1]),
        "n_train": int(len(ds.train)),
        "n_val": int(len(ds.val)),
        "n_test": int(len(ds.test)),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_blob(out / "train.f32", ds.train)
    _write_blob(out / "val.f32", ds.val)
    _write_blob(out / "test.f32", ds.test)


def save_images(ds: ImageDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "images",
        "seed": ds.seed,
        "size": ds.size,
        "n_train": int(len(ds.train)),
        "n_val": int(len(ds.val)),
        "damage_kinds": sorted(ds.test),
        "n_test_per_kind": {k: int(len(v)) for k, v in sorted(ds.test.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_blob(out / "train.f32", ds.train)
    _write_blob(out / "val.f32", ds.val)
    for kind in sorted(ds.test):
        _write_blob(out / f"test_{kind}.f32", ds.test[kind])
        _write_blob(out / f"mask_{kind}.f32", ds.masks[kind])


def load_dataset(path):
    """Load a dataset directory back into its dataclass (tabular or images)."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["kind"] == "tabular":
        m = manifest["n_features"]
        return TabularDataset(
            _read_blob(root / "train.f32", (manifest["n_train"], m)),
            _read_blob(root / "val.f32", (manifest["n_val"], m)),
            _read_blob(root / "test.f32", (manifest["n_test"], m)),
            manifest["seed"],
            manifest["latent_dim"],
        )
    if manifest["kind"] == "images":
        size = manifest["size"]
        ds = ImageDataset(
            _read_blob(root / "train.f32", (manifest["n_train"], size, size)),
            _read_blob(root / "val.f32", (manifest["n_val"], size, size)),
            seed=manifest["seed"],
            size=size,
        )
        for kind in manifest["damage_kinds"]:
            n = manifest["n_test_per_kind"][kind]
            ds.test[kind] = _read_blob(root / f"test_{kind}.f32", (n, size, size))
            ds.masks[kind] = _read_blob(root / f"mask_{kind}.f32", (n, size, size))
        return ds
    raise ValueError(f"unknown dataset kind {manifest['kind']!r}")


def write_pgm(path, img01: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [0, 1] grayscale image."""
    img = np.asarray(img01, dtype=np.float64)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    parts = raw.split(maxsplit=4)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval
