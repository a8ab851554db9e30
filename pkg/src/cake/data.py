"""Datasets and on-disk formats.

Checkpoint file (``.ckpt``), all integers little-endian::

    b"CAKE" | u32 version | u32 len + UTF-8 JSON architecture |
    u32 tensor count | per tensor: u16 len + UTF-8 name, u8 rank,
    rank x u32 dims, float32 data

Synthetic dataset file (``.csyn``)::

    b"CSYN" | u32 version | u32 M | u32 N | u32 C | u8 rank | rank x u32 dims |
    M*N*prod(dims) float32 samples | M*N u8 labels | u32 len + UTF-8 JSON meta

JSON is written with sorted keys and no whitespace so equal values give equal
bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, FormatError
from .models import LayerSpec, Network
from .synthesis import SyntheticDataset

CKPT_MAGIC = b"CAKE"
SYNTH_MAGIC = b"CSYN"
FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "CAKE_DATA_DIR"


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    normalization: tuple[np.ndarray, np.ndarray]
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DomainError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, n: int) -> LabeledDataset:
        return LabeledDataset(self.inputs[:n], self.labels[:n], self.normalization, self.num_classes)


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# two moons


def two_moons_raw(n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n % 2:
        raise DomainError(f"two-moons needs an even sample count, got {n}")
    if noise_std < 0:
        raise DomainError(f"noise_std must be >= 0, got {noise_std}")
    half = n // 2
    theta = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(theta[:half]), np.sin(theta[:half])], axis=1)
    lower = np.stack([1 - np.cos(theta[half:]), 0.5 - np.sin(theta[half:])], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0.0, noise_std, size=(n, 2))
    y = np.repeat(np.arange(2), half)
    return x, y


def gen_two_moons(
    n: int,
    noise_std: float = 0.1,
    rng: np.random.Generator | None = None,
    normalization: tuple[np.ndarray, np.ndarray] | None = None,
) -> LabeledDataset:
    """Two interleaved half circles, standardised per coordinate.

    Pass the training split's ``normalization`` when generating a test split
    so both live in the same coordinates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = two_moons_raw(n, noise_std, rng)
    if normalization is None:
        normalization = (x.mean(axis=0), x.std(axis=0))
    mean, std = normalization
    x = (x - mean) / np.where(std > 0, std, 1.0)
    return LabeledDataset(x.astype(np.float32), y, (np.asarray(mean), np.asarray(std)), 2)


# ---------------------------------------------------------------------------
# MNIST


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: expected {size} data bytes, file ends early", offset=len(raw))
    if len(raw) > header + size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes", offset=header + size)
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(
    images_path,
    labels_path,
    normalization: tuple[np.ndarray, np.ndarray] | None = None,
) -> LabeledDataset:
    """Read an MNIST image/label IDX pair.

    Images are zero-padded from 28x28 to 32x32, scaled to [0, 1] and then
    standardised.  Without ``normalization`` the mean and std of this split
    are used (do that for the training split and pass the result on to the
    test split).
    """
    (n_img, rows, cols), images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"image file holds {n_img} items but label file holds {n_lab}", offset=4)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label {labels.max()} outside [0, 9]", offset=8)
    pad_r, pad_c = (32 - rows) // 2, (32 - cols) // 2
    if pad_r < 0 or pad_c < 0:
        raise FormatError(f"images of {rows}x{cols} do not fit 32x32", offset=8)
    x = np.zeros((n_img, 1, 32, 32), dtype=np.float32)
    x[:, 0, pad_r : pad_r + rows, pad_c : pad_c + cols] = images / np.float32(255.0)
    if normalization is None:
        mean = np.array([x.mean(dtype=np.float64)], dtype=np.float32)
        std = np.array([x.std(dtype=np.float64)], dtype=np.float32)
        normalization = (mean, std)
    mean, std = (np.asarray(a, dtype=np.float32).reshape(-1) for a in normalization)
    safe = np.where(std > 0, std, np.float32(1.0))
    x = (x - mean.reshape(1, -1, 1, 1)) / safe.reshape(1, -1, 1, 1)
    return LabeledDataset(x.astype(np.float32), labels.astype(np.int64), (mean, std), 10)


def load_mnist(data_dir=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits from a directory holding the four standard files."""
    d = Path(data_dir) if data_dir is not None else default_data_dir() / "mnist"
    train = load_mnist_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    test = load_mnist_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", train.normalization)
    return train, test


# ---------------------------------------------------------------------------
# binary helpers


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw, self.pos, self.what = raw, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes", offset=self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def text(self, width: str = "I") -> str:
        n = self.unpack(width)
        start = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 in {self.what}", offset=start) from e

    def json(self) -> dict:
        start = self.pos
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON in {self.what}", offset=start) from e

    def finish(self) -> None:
        if self.pos != len(self.raw):
            raise FormatError(f"{len(self.raw) - self.pos} trailing bytes in {self.what}", offset=self.pos)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _magic(r: _Reader, magic: bytes) -> None:
    if not r.raw:
        raise FormatError(f"empty {r.what}", offset=0)
    if r.raw[:4] != magic:
        raise FormatError(f"bad magic in {r.what}, expected {magic!r}", offset=0)
    r.pos = 4
    version = r.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what} version {version} unsupported (expected {FORMAT_VERSION})", offset=4)


# ---------------------------------------------------------------------------
# checkpoints


def architecture(net: Network) -> dict:
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [[layer.kind, list(layer.dims)] for layer in net.layers],
    }


def checkpoint_bytes(net: Network) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    arch = _dumps(architecture(net))
    out += [struct.pack("<I", len(arch)), arch, struct.pack("<I", len(net.params))]
    for name, p in net.named_parameters():
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", p.data.ndim)]
        out.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def parse_checkpoint(raw: bytes, what: str = "checkpoint") -> Network:
    r = _Reader(raw, what)
    _magic(r, CKPT_MAGIC)
    arch = r.json()
    try:
        layers = [LayerSpec(kind, tuple(dims)) for kind, dims in arch["layers"]]
        input_shape = tuple(arch["input_shape"])
        num_classes = int(arch["num_classes"])
        name = str(arch["name"])
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise FormatError(f"malformed architecture in {what}: {e}", offset=12) from e
    shapes = [tuple(s) for layer in layers for s in layer.param_shapes]
    count_at = r.pos
    count = r.unpack("I")
    if count != len(shapes):
        raise FormatError(f"{what}: architecture expects {len(shapes)} tensors, file claims {count}", offset=count_at)
    params = []
    for i, expected in enumerate(shapes):
        r.text("H")
        rank_at = r.pos
        rank = r.unpack("B")
        dims = tuple(r.unpack(f"{rank}I")) if rank > 1 else ((r.unpack("I"),) if rank == 1 else ())
        if dims != expected:
            raise FormatError(f"{what}: tensor {i} has shape {dims}, architecture expects {expected}", offset=rank_at)
        data = r.floats(int(np.prod(dims))).reshape(dims)
        params.append(Tensor(data, requires_grad=True))
    r.finish()
    try:
        return Network(layers, params, input_shape, num_classes, name)
    except ConfigError as e:
        raise FormatError(f"inconsistent architecture in {what}: {e}", offset=12) from e


def load_checkpoint(path) -> Network:
    return parse_checkpoint(Path(path).read_bytes(), f"checkpoint {path}")


# ---------------------------------------------------------------------------
# synthetic datasets


def synth_bytes(d: SyntheticDataset) -> bytes:
    if d.num_classes > 256:
        raise ConfigError("the synthetic file format stores labels as u8 (at most 256 classes)")
    shape = d.input_shape
    out = [
        SYNTH_MAGIC,
        struct.pack("<IIII", FORMAT_VERSION, d.minibatches, d.batch_size, d.num_classes),
        struct.pack("<B", len(shape)),
        struct.pack(f"<{len(shape)}I", *shape),
        np.ascontiguousarray(d.samples, dtype="<f4").tobytes(),
        np.asarray(d.labels, dtype=np.uint8).tobytes(),
    ]
    meta = _dumps(d.meta)
    out += [struct.pack("<I", len(meta)), meta]
    return b"".join(out)


def save_synth(d: SyntheticDataset, path) -> None:
    Path(path).write_bytes(synth_bytes(d))


def parse_synth(raw: bytes, what: str = "synthetic dataset") -> SyntheticDataset:
    r = _Reader(raw, what)
    _magic(r, SYNTH_MAGIC)
    M, N, C = r.unpack("III")
    if M < 1 or N < 1 or C < 1:
        raise FormatError(f"{what}: counts M={M}, N={N}, C={C} must be positive", offset=8)
    rank = r.unpack("B")
    dims = tuple(r.unpack(f"{rank}I")) if rank > 1 else ((r.unpack("I"),) if rank == 1 else ())
    total = M * N
    samples = r.floats(total * int(np.prod(dims))).reshape((total, *dims))
    label_at = r.pos
    labels = np.frombuffer(r.take(total), dtype=np.uint8).astype(np.int64)
    if total and labels.max() >= C:
        bad = int(np.argmax(labels >= C))
        raise FormatError(f"{what}: label {labels[bad]} >= class count {C}", offset=label_at + bad)
    meta_at = r.pos
    meta = r.json()
    r.finish()
    cfg = meta.get("config", {}) if isinstance(meta, dict) else {}
    if cfg and (cfg.get("minibatches", M) != M or cfg.get("batch_size", N) != N):
        raise FormatError(
            f"{what}: header says M={M}, N={N} but metadata says "
            f"M={cfg.get('minibatches')}, N={cfg.get('batch_size')}",
            offset=meta_at,
        )
    return SyntheticDataset(samples, labels, M, N, C, meta)


def load_synth(path) -> SyntheticDataset:
    return parse_synth(Path(path).read_bytes(), f"synthetic dataset {path}")


# ---------------------------------------------------------------------------
# decision grids


def decision_grid(net: Network, bounds: tuple[float, float, float, float], resolution: int) -> np.ndarray:
    """Rows of (x, y, argmax class, max softmax probability) on a k x k grid
    over ``bounds = (x_min, x_max, y_min, y_max)``; x varies fastest."""
    if tuple(net.input_shape) != (2,):
        raise ConfigError(f"decision grids need a 2-D input network, got input shape {net.input_shape}")
    if resolution < 1:
        raise DomainError(f"resolution must be positive, got {resolution}")
    x0, x1, y0, y1 = bounds
    if resolution == 1:
        xs, ys = np.array([(x0 + x1) / 2]), np.array([(y0 + y1) / 2])
    else:
        xs, ys = np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    with ad.no_grad():
        z = net(Tensor(pts)).data.astype(np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return np.column_stack([pts, z.argmax(axis=1), p.max(axis=1)])


def export_decision_grid(net: Network, bounds, resolution: int, path=None) -> str:
    """CSV text with header ``x,y,class,confidence``; written to ``path`` if given."""
    rows = decision_grid(net, tuple(bounds), resolution)
    lines = ["x,y,class,confidence"]
    lines += [f"{x:.6f},{y:.6f},{int(c)},{conf:.6f}" for x, y, c, conf in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
