"""Tensor manifests, CIFAR binary records, synthetic shapes and event binning.

Manifest layout: a directory holding ``manifest.json`` (a list of
``{name, shape, dtype, file, byte_order}``) and one raw little-endian
buffer per tensor.  Event fixtures are text files with one ``t x y p``
event per line (microseconds, pixel column, pixel row, polarity 0/1).
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4"), "u8": np.dtype("u1")}
MANIFEST = "manifest.json"

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype
    if kind == np.float32:
        return "f32"
    if kind == np.float64:
        return "f64"
    if kind == np.uint8:
        return "u8"
    if kind.kind in "iub":
        return "i32"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def _file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_tensors(directory: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        fname = _file_name(name)
        directory.joinpath(fname).write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "file": fname,
                        "byte_order": "little-endian"})
    (directory / MANIFEST).write_text(json.dumps(entries, indent=1))
    return directory / MANIFEST


def load_tensors(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    entries = json.loads((directory / MANIFEST).read_text())
    out = {}
    for e in entries:
        if e.get("byte_order", "little-endian") != "little-endian":
            raise FormatError(f"{e['name']}: unsupported byte order {e['byte_order']}")
        dt = DTYPES[e["dtype"]]
        raw = (directory / e["file"]).read_bytes()
        expected = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if len(raw) != expected:
            raise FormatError(f"{e['file']}: {len(raw)} bytes, manifest implies {expected}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return out


def load_cifar_batch(path: str | Path, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Read a raw CIFAR-10 binary batch (label byte + 3072 pixel bytes per record).

    Images come back as float32 (n, 3, 32, 32) scaled to [0, 1] and, when
    ``normalize``, standardised with the usual CIFAR-10 channel statistics.
    """
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                          f"({len(raw)} bytes is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if normalize:
        images = (images - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]
    return images, labels


def write_cifar_batch(path: str | Path, images_u8: np.ndarray, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _bar(h, w, horizontal: bool, thick: int) -> np.ndarray:
    img = np.zeros((h, w), np.float32)
    if horizontal:
        r = h // 2 - thick // 2
        img[r:r + thick, :] = 1
    else:
        c = w // 2 - thick // 2
        img[:, c:c + thick] = 1
    return img


def _disk(h, w, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    return (((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) <= radius ** 2).astype(np.float32)


def _diag(h, w, anti: bool) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    d = (xx + yy - (w - 1)) if anti else (xx - yy)
    return (np.abs(d) <= 1).astype(np.float32)


def _ring(h, w, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    r = np.sqrt((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2)
    return (np.abs(r - radius) <= 0.75).astype(np.float32)


def _square(h, w, half: int) -> np.ndarray:
    img = np.zeros((h, w), np.float32)
    cy, cx = h // 2, w // 2
    img[cy - half:cy + half, cx - half:cx + half] = 1
    return img


def _cross(h, w, diagonal: bool) -> np.ndarray:
    if diagonal:
        return np.maximum(_diag(h, w, False), _diag(h, w, True))
    return np.maximum(_bar(h, w, True, 1), _bar(h, w, False, 1))


def archetypes(h: int, w: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Two archetype images per class, in class order."""
    r = max(1.0, min(h, w) / 8)
    return [
        (_bar(h, w, True, 2), _bar(h, w, False, 2)),            # oriented bars
        (_disk(h, w, r), _square(h, w, max(1, int(r)))),        # compact blobs
        (_diag(h, w, False), _diag(h, w, True)),                # diagonals
        (_ring(h, w, 2 * r), _ring(h, w, 1.5 * r)),             # rings
        (_cross(h, w, False), _cross(h, w, True)),              # crosses
    ]


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) or (n, T, C, H, W)
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def synth_dataset(num_classes: int = 2, samples: int = 500, geometry=(1, 16, 16), seed: int = 0,
                  noise: float = 0.1, jitter: int = 3) -> Dataset:
    """Labelled shape images: class ``k`` draws one of its two archetypes.

    Archetypes are shifted by up to ``jitter`` pixels (cyclically) and get
    Gaussian pixel noise of std ``noise``.  With ``noise=0`` and
    ``jitter=0`` every sample equals one of its class's archetypes.
    """
    C, H, W = geometry
    protos = archetypes(H, W)
    if not 1 <= num_classes <= len(protos):
        raise ValueError(f"num_classes must be between 1 and {len(protos)}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=samples)
    which = rng.integers(0, 2, size=samples)
    shifts = rng.integers(-jitter, jitter + 1, size=(samples, 2)) if jitter else np.zeros((samples, 2), int)
    images = np.empty((samples, C, H, W), np.float32)
    for i in range(samples):
        img = np.roll(protos[labels[i]][which[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = img[None]
    if noise:
        images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes)


# ---------------------------------------------------------------------------
# event streams
# ---------------------------------------------------------------------------

@dataclass
class EventStream:
    t: np.ndarray  # microseconds, nondecreasing
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray  # polarity 0/1
    height: int
    width: int

    def __post_init__(self):
        self.t = np.asarray(self.t, np.int64)
        self.x = np.asarray(self.x, np.int64)
        self.y = np.asarray(self.y, np.int64)
        self.p = np.asarray(self.p, np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field lengths differ")
        if n and np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be nondecreasing")
        if n and (self.x.min() < 0 or self.x.max() >= self.width
                  or self.y.min() < 0 or self.y.max() >= self.height):
            raise ValueError("event coordinates outside sensor geometry")
        if n and not np.isin(self.p, (0, 1)).all():
            raise ValueError("polarity must be 0 or 1")

    def __len__(self) -> int:
        return len(self.t)


def read_events(path: str | Path, height: int, width: int) -> EventStream:
    """Parse a ``t x y p`` text fixture; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 't x y p', got {line!r}")
        rows.append([int(v) for v in parts])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], height, width)


def bin_events(stream: EventStream, T: int, clip: int | None = None) -> np.ndarray:
    """Count events into (T, 2, H, W) frames over T equal time windows.

    Channel 0 holds polarity-0 (negative) events, channel 1 polarity-1.
    The final event lands in the last window.  ``clip`` caps per-pixel counts.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    frames = np.zeros((T, 2, stream.height, stream.width), np.float32)
    if len(stream) == 0:
        logger.warning("empty event stream; returning zero frames")
        return frames
    t0, t1 = stream.t[0], stream.t[-1]
    span = max(int(t1 - t0), 1)
    idx = np.minimum((stream.t - t0) * T // span, T - 1)
    np.add.at(frames, (idx, stream.p, stream.y, stream.x), 1)
    if clip is not None:
        np.minimum(frames, clip, out=frames)
    return frames
