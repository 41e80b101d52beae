"""Desk-scale datasets: a procedural two-domain generator, an MNIST
fetcher with an offline cache, and TAB-separated corpus manifests.

The procedural dataset exists so training, translation, and retrieval can
be exercised end-to-end without licensed data: domain 0 is a warm-colored
disk over horizontal stripes, domain 1 a cool-colored square over
vertical stripes, so the two domains have clearly distinct color and
texture statistics.
"""

from __future__ import annotations

import gzip
import os
import struct
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MNIST_MIRRORS = (
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
)
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


def data_dir() -> Path:
    """Dataset cache location, overridable via IMPRESSION_DATA_DIR."""
    root = os.environ.get("IMPRESSION_DATA_DIR")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "impression"


@dataclass
class LabeledDataset:
    """In-memory labeled image batch: N,C,H,W pixels in [0,1] plus int labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str

    def __len__(self) -> int:
        return len(self.images)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


# ---------------------------------------------------------------------------
# procedural two-domain dataset
# ---------------------------------------------------------------------------


def _two_domain_sample(rng: np.random.Generator, domain: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    if domain == 0:
        stripes = 0.18 + 0.10 * np.sin(2 * np.pi * freq * yy + phase)
        bg = np.stack([stripes * 1.1, stripes, stripes * 0.9])
        color = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.25, 0.40), rng.uniform(0.10, 0.25)])
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        radius = rng.uniform(0.16, 0.30)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        tex = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * yy + rng.uniform(0, 2 * np.pi))
    else:
        stripes = 0.60 + 0.10 * np.sin(2 * np.pi * freq * xx + phase)
        bg = np.stack([stripes * 0.9, stripes, stripes * 1.1])
        color = np.array([rng.uniform(0.10, 0.25), rng.uniform(0.25, 0.40), rng.uniform(0.75, 0.95)])
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        half = rng.uniform(0.14, 0.26)
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        tex = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * xx + rng.uniform(0, 2 * np.pi))
    img = bg.copy()
    for c in range(3):
        img[c][mask] = (color[c] * tex)[mask]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_two_domain(n_per_domain: int, size: int = 32, seed: int = 0, shuffle: bool = True) -> LabeledDataset:
    """Balanced two-domain RGB dataset; label equals the domain index."""
    rng = np.random.default_rng(seed)
    images = np.empty((2 * n_per_domain, 3, size, size), dtype=np.float32)
    labels = np.empty(2 * n_per_domain, dtype=np.int64)
    for i in range(n_per_domain):
        images[2 * i] = _two_domain_sample(rng, 0, size)
        labels[2 * i] = 0
        images[2 * i + 1] = _two_domain_sample(rng, 1, size)
        labels[2 * i + 1] = 1
    if shuffle:
        order = rng.permutation(len(images))
        images, labels = images[order], labels[order]
    return LabeledDataset(images=images, labels=labels, name=f"two-domain-{size}-seed{seed}")


def generate_domain(domain: int, count: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """Images from a single domain (for translation source/target sets)."""
    rng = np.random.default_rng(seed)
    return np.stack([_two_domain_sample(rng, domain, size) for _ in range(count)])


# ---------------------------------------------------------------------------
# MNIST (IDX format)
# ---------------------------------------------------------------------------


def parse_idx(raw: bytes) -> np.ndarray:
    """Parse an (uncompressed) IDX payload into an ndarray."""
    if len(raw) < 4:
        raise DataError("IDX payload shorter than its header")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"unsupported IDX header {raw[:4].hex()}; expected unsigned-byte data")
    if len(raw) < 4 + 4 * ndim:
        raise DataError("IDX payload truncated inside its dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    expected = int(np.prod(dims))
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != expected:
        raise DataError(f"IDX payload has {data.size} values, header declares {expected}")
    return data.reshape(dims)


def _fetch_mnist_file(filename: str, dest: Path) -> None:
    last_error: Exception | None = None
    for mirror in MNIST_MIRRORS:
        try:
            with urllib.request.urlopen(mirror + filename, timeout=60) as resp:
                dest.write_bytes(resp.read())
            return
        except (urllib.error.URLError, OSError) as exc:
            last_error = exc
    raise DataError(f"could not download {filename} from any mirror: {last_error}")


def load_mnist(root: Path | None = None, download: bool = True) -> tuple[LabeledDataset, LabeledDataset]:
    """Load MNIST from the cache, fetching it on first use when permitted."""
    root = Path(root) if root is not None else data_dir() / "mnist"
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for key, filename in MNIST_FILES.items():
        path = root / filename
        if not path.exists():
            if not download:
                raise DataError(f"MNIST file {path} is missing and download is disabled")
            _fetch_mnist_file(filename, path)
        arrays[key] = parse_idx(gzip.decompress(path.read_bytes()))
    train_images = (arrays["train_images"].astype(np.float32) / 255.0)[:, None, :, :]
    test_images = (arrays["test_images"].astype(np.float32) / 255.0)[:, None, :, :]
    train = LabeledDataset(train_images, arrays["train_labels"].astype(np.int64), "mnist-train")
    test = LabeledDataset(test_images, arrays["test_labels"].astype(np.int64), "mnist-test")
    return train, test


def mnist_available(root: Path | None = None) -> bool:
    root = Path(root) if root is not None else data_dir() / "mnist"
    return all((root / filename).exists() for filename in MNIST_FILES.values())


# ---------------------------------------------------------------------------
# corpus manifests: id<TAB>path[<TAB>label]
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    path: Path
    label: str | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; relative image paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected 2 or 3 TAB-separated fields, got {len(fields)}")
        item_id = fields[0].strip()
        if not item_id:
            raise DataError(f"{path}:{lineno}: empty item id")
        if item_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate item id {item_id!r}")
        seen.add(item_id)
        img_path = Path(fields[1])
        if not img_path.is_absolute():
            img_path = base / img_path
        label = fields[2].strip() if len(fields) == 3 else None
        entries.append(ManifestEntry(item_id=item_id, path=img_path, label=label))
    return entries


def write_manifest(entries: list[ManifestEntry], path) -> None:
    lines = []
    for e in entries:
        fields = [e.item_id, str(e.path)]
        if e.label is not None:
            fields.append(e.label)
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
