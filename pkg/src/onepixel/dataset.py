"""Image containers, CIFAR-10 / PPM / PGM codecs and seeded fixtures."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from onepixel.errors import FormatError, ParameterError
from onepixel.model import LayerSpec, infer_shapes, parse_manifest
from onepixel.rng import Rng

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass(frozen=True, eq=False)
class Image:
    """An RGB image stored as bytes ``(height, width, 3)``.

    The network sees :attr:`normalized`, the same pixels divided by 255.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.uint8, copy=True)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ParameterError(f"image pixels must be (H, W, 3), got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def normalized(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / np.float32(255.0)

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.pixels.tobytes())


@dataclass(frozen=True)
class LabeledImage:
    image: Image
    label: int
    id: str


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar10(data: bytes, id_prefix: str = "cifar") -> list[LabeledImage]:
    """Parse CIFAR-10 binary records (label byte + R, G, B planes of 32x32)."""
    data = bytes(data)
    if len(data) % CIFAR_RECORD:
        n_full = len(data) // CIFAR_RECORD
        raise FormatError(
            f"CIFAR-10 stream length {len(data)} is not a multiple of {CIFAR_RECORD}; "
            f"record {n_full} is incomplete",
            n_full,
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    out = []
    for i, rec in enumerate(records):
        label = int(rec[0])
        if label > 9:
            raise FormatError(f"record {i} has label {label} > 9", i)
        planes = rec[1:].reshape(3, CIFAR_SIDE, CIFAR_SIDE)
        out.append(LabeledImage(Image(planes.transpose(1, 2, 0)), label, f"{id_prefix}-{i}"))
    return out


def write_cifar10(samples) -> bytes:
    chunks = []
    for s in samples:
        px = s.image.pixels
        if px.shape != (CIFAR_SIDE, CIFAR_SIDE, 3) or not 0 <= s.label <= 9:
            raise ParameterError(f"sample {s.id} cannot be stored as a CIFAR-10 record")
        chunks.append(bytes([s.label]) + px.transpose(2, 0, 1).tobytes())
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# netpbm

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def _read_pnm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    data = bytes(data)
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, got {data[:2]!r}", 0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"missing {what} in header", pos)
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is accepted", pos)
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", pos)
    n = width * height * channels
    if len(data) - pos < n:
        raise FormatError(f"truncated pixel data: need {n} bytes, have {len(data) - pos}", len(data))
    if len(data) - pos > n:
        raise FormatError(f"{len(data) - pos - n} trailing bytes after pixel data", pos + n)
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(height, width, channels)


def read_ppm(data: bytes) -> Image:
    """Decode a binary (P6) PPM with maxval 255."""
    return Image(_read_pnm(data, b"P6", 3))


def write_ppm(image: Image) -> bytes:
    return f"P6\n{image.width} {image.height}\n255\n".encode() + image.pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with maxval 255 into a ``(h, w)`` uint8 array."""
    return _read_pnm(data, b"P5", 1)[:, :, 0]


def write_pgm(gray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ParameterError(f"PGM needs a 2-D array, got shape {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.tobytes()


# ---------------------------------------------------------------------------
# synthetic fixtures

_PALETTE = np.array(
    [
        [200, 60, 60], [60, 160, 60], [60, 80, 200], [200, 180, 50], [160, 60, 180],
        [50, 170, 170], [220, 120, 40], [120, 120, 120], [40, 40, 90], [230, 200, 210],
    ],
    dtype=np.float64,
)


def synth_dataset(
    seed: int,
    n: int,
    class_count: int = 10,
    side: int = 32,
    contrast: float = 0.35,
    noise: float = 18.0,
    color_mix: float = 0.6,
) -> list[LabeledImage]:
    """Deterministic stand-in for CIFAR: class-coded stripe textures plus noise.

    Class ``c`` sets the stripe angle ``pi * c / class_count`` (jittered), the
    frequency ``2 + c % 3`` cycles per image and, with weight ``color_mix``,
    the base colour (a fixed palette entry blended with a random colour).
    Phase, the random colour share and pixel noise are seeded nuisances.
    Labels are a seeded shuffle of each consecutive block of ``class_count``
    samples, so every prefix is close to class-balanced.
    """
    if n < 1:
        raise ParameterError("n must be at least 1")
    if class_count < 1:
        raise ParameterError("class_count must be at least 1")
    rng = Rng(seed).spawn("synth")
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = []
    block: list[int] = []
    for i in range(n):
        if not block:
            block = list(range(class_count))
            # Fisher-Yates, drawn from the end
            for j in range(class_count - 1, 0, -1):
                k = int(rng.integers(j + 1, 1)[0])
                block[j], block[k] = block[k], block[j]
        label = block.pop()
        phase, jitter = rng.uniform(2)
        base = color_mix * _PALETTE[label % len(_PALETTE)] + (1 - color_mix) * rng.uniform(3, 40.0, 220.0)
        angle = math.pi * label / class_count + 0.2 * (jitter - 0.5)
        freq = (2 + label % 3) * 2 * math.pi / side
        wave = np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + 2 * math.pi * phase)
        img = base[None, None, :] * (1.0 + contrast * wave[:, :, None])
        img += rng.normal(side * side * 3, 0.0, noise).reshape(side, side, 3)
        px = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        out.append(LabeledImage(Image(px), label, f"synth{seed}-{i}"))
    return out


def gen_weights(seed: int, manifest: str | list[LayerSpec]) -> dict[str, np.ndarray]:
    """Seeded He-initialised weights for every block a manifest needs.

    conv/dense weights ~ N(0, 2/fan_in), biases 0; batchnorm gamma=1, beta=0,
    mean=0, var=1. Blocks are drawn in layer order from one stream.
    """
    layers = parse_manifest(manifest) if isinstance(manifest, str) else manifest
    _, required = infer_shapes(layers)
    rng = Rng(seed).spawn("weights")
    store: dict[str, np.ndarray] = {}
    for spec in layers:
        for name in spec.weight_names():
            shape = required[name]
            suffix = name.rsplit(".", 1)[1]
            if suffix == "w":
                fan_in = math.prod(shape[1:])
                values = rng.normal(math.prod(shape), 0.0, math.sqrt(2.0 / fan_in))
            elif suffix in ("gamma", "var"):
                values = np.ones(shape)
            else:
                values = np.zeros(shape)
            store[name] = np.asarray(values, dtype=np.float32).reshape(shape)
    return store
