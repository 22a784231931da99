"""Model graphs: manifests, ``.opxw`` weight files and forward execution.

Manifest grammar, one layer per line (``#`` starts a comment)::

    <index> <kind> [key=value ...] [in=<idx>[,<idx>]] [w=<weight-prefix>]

Index 0 must be the ``input`` layer (``h=``, ``w=``, ``c=``). Layers are
listed in increasing index order and may only consume earlier layers, which
makes every valid manifest a DAG; ``in`` defaults to the previous line. The
last layer must be ``softmax`` and is the single output.

Weight blocks are looked up by prefix: ``conv``/``dense`` use ``<p>.w`` and
``<p>.b``; ``batchnorm`` uses ``<p>.gamma``, ``<p>.beta``, ``<p>.mean`` and
``<p>.var``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from onepixel import tensor
from onepixel.errors import ConfigError, FormatError, ShapeError

MAGIC = b"OPXW"
VERSION = 1
MAX_ELEMENTS = 1 << 28

LAYER_KINDS = (
    "input",
    "conv",
    "batchnorm",
    "relu",
    "pool_max",
    "pool_avg",
    "global_avg",
    "dense",
    "softmax",
    "residual_begin",
    "residual_add",
    "flatten",
)

BUNDLED_MANIFESTS = ("lenet-small", "resnet-mini", "tiny-8x8")

# ---------------------------------------------------------------------------
# weight files


def serialize_weights(store: dict[str, np.ndarray]) -> bytes:
    """Encode a weight store in the little-endian ``.opxw`` layout."""
    out = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, values in store.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(values, dtype="<f4")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def load_weights(data: bytes) -> dict[str, np.ndarray]:
    """Parse an ``.opxw`` byte stream into ``{name: float32 array}``.

    Raises :class:`FormatError` carrying the byte offset of the first problem.
    """
    data = bytes(data)
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated stream while reading {what}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'OPXW'", 0)
    version_at = pos
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", version_at)

    store: dict[str, np.ndarray] = {}
    for _ in range(count):
        block_at = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("block name is not valid UTF-8", block_at + 2) from exc
        if name in store:
            raise FormatError(f"duplicate block {name!r}", block_at)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims_at = pos
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = math.prod(dims)
        if n > MAX_ELEMENTS:
            raise FormatError(f"block {name!r} dimensions {dims} overflow", dims_at)
        values = np.frombuffer(take(4 * n, f"values of {name!r}"), dtype="<f4")
        store[name] = values.astype(np.float32).reshape(dims)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last block", pos)
    return store


def read_weights_file(path) -> dict[str, np.ndarray]:
    return load_weights(Path(path).read_bytes())


def write_weights_file(path, store: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(serialize_weights(store))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple[int, ...] = ()
    weight_prefix: str | None = None

    @property
    def name(self) -> str:
        return self.weight_prefix or f"{self.kind}{self.index}"

    def weight_names(self) -> tuple[str, ...]:
        suffixes = {
            "conv": ("w", "b"),
            "dense": ("w", "b"),
            "batchnorm": ("gamma", "beta", "mean", "var"),
        }.get(self.kind, ())
        return tuple(f"{self.weight_prefix}.{s}" for s in suffixes)


_INT_KEYS = {"h", "w", "c", "out", "k", "kh", "kw", "stride", "pad", "size", "units"}
_FLOAT_KEYS = {"eps"}


def bundled_manifest(name: str) -> str:
    if name not in BUNDLED_MANIFESTS:
        raise ConfigError(f"no bundled manifest named {name!r}")
    return resources.files("onepixel.manifests").joinpath(f"{name}.txt").read_text()


def read_manifest(name_or_path) -> str:
    """Manifest text from a bundled name (``lenet-small``) or a file path."""
    if str(name_or_path) in BUNDLED_MANIFESTS:
        return bundled_manifest(str(name_or_path))
    return Path(name_or_path).read_text()


def parse_manifest(text: str) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ConfigError(f"line {lineno}: expected '<index> <kind> ...'")
        try:
            index = int(tokens[0])
        except ValueError:
            raise ConfigError(f"line {lineno}: layer index {tokens[0]!r} is not an integer") from None
        kind = tokens[1]
        if kind not in LAYER_KINDS:
            raise ConfigError(f"layer {index}: unknown layer kind {kind!r}")
        params: dict = {}
        inputs: tuple[int, ...] | None = None
        prefix = None
        for tok in tokens[2:]:
            key, sep, value = tok.partition("=")
            if not sep:
                raise ConfigError(f"layer {index}: malformed token {tok!r}")
            try:
                if key == "in":
                    inputs = tuple(int(v) for v in value.split(","))
                elif key == "w" and kind != "input":
                    prefix = value
                elif key in _INT_KEYS:
                    params[key] = int(value)
                elif key in _FLOAT_KEYS:
                    params[key] = float(value)
                else:
                    raise ConfigError(f"layer {index}: unknown parameter {key!r}")
            except ValueError:
                raise ConfigError(f"layer {index}: bad value in {tok!r}") from None
        if layers and index <= layers[-1].index:
            raise ConfigError(f"layer {index}: indices must increase")
        if inputs is None:
            inputs = () if kind == "input" else (layers[-1].index,) if layers else ()
        for src in inputs:
            if src >= index:
                raise ConfigError(f"layer {index}: input {src} is not an earlier layer (cyclic graph)")
        layers.append(LayerSpec(index, kind, params, inputs, prefix))
    return layers


def _pool_params(spec: LayerSpec) -> tuple[int, int]:
    size = spec.params.get("size", 2)
    return size, spec.params.get("stride", size)


def _conv_params(spec: LayerSpec) -> tuple[int, int, int, int, int]:
    k = spec.params.get("k", 3)
    return (
        spec.params["out"],
        spec.params.get("kh", k),
        spec.params.get("kw", k),
        spec.params.get("stride", 1),
        spec.params.get("pad", 0),
    )


def infer_shapes(layers: list[LayerSpec]) -> tuple[dict[int, tuple], dict[str, tuple]]:
    """Output shape of every layer and the weight blocks the graph requires.

    Spatial outputs are ``(h, w, c)``; vectors are ``(n,)``.
    """
    if not layers or layers[0].kind != "input" or layers[0].index != 0:
        raise ConfigError("manifest must start with '0 input h=.. w=.. c=..'")
    shapes: dict[int, tuple] = {}
    required: dict[str, tuple] = {}
    consumers: dict[int, int] = {}
    for spec in layers:
        for src in spec.inputs:
            if src not in shapes:
                raise ConfigError(f"layer {spec.index} ({spec.name}): unknown input layer {src}")
            consumers[src] = consumers.get(src, 0) + 1
        shapes[spec.index] = _infer_one(spec, [shapes[s] for s in spec.inputs], required)

    sinks = [s.index for s in layers if consumers.get(s.index, 0) == 0]
    if sinks != [layers[-1].index]:
        raise ConfigError(f"graph must have a single output layer, found outputs {sinks}")
    if layers[-1].kind != "softmax":
        raise ConfigError(f"output layer {layers[-1].index} must be softmax")
    return shapes, required


def _infer_one(spec: LayerSpec, ins: list[tuple], required: dict[str, tuple]) -> tuple:
    kind = spec.kind
    where = f"layer {spec.index} ({spec.name})"
    arity = 2 if kind == "residual_add" else 0 if kind == "input" else 1
    if len(ins) != arity:
        raise ConfigError(f"{where}: {kind} takes {arity} input(s), got {len(ins)}")
    if kind in ("conv", "dense", "batchnorm") and spec.weight_prefix is None:
        raise ConfigError(f"{where}: missing w=<prefix>")

    if kind == "input":
        try:
            return (spec.params["h"], spec.params["w"], spec.params["c"])
        except KeyError as exc:
            raise ConfigError(f"{where}: input needs h, w and c") from exc
    shape = ins[0]
    spatial = len(shape) == 3
    if kind in ("conv", "batchnorm", "pool_max", "pool_avg", "global_avg") and not spatial:
        raise ConfigError(f"{where}: {kind} needs a spatial input, got {shape}")
    if kind == "conv":
        try:
            out, kh, kw, stride, pad = _conv_params(spec)
        except KeyError as exc:
            raise ConfigError(f"{where}: conv needs out=") from exc
        h = tensor.conv_output_size(shape[0], kh, stride, pad)
        w = tensor.conv_output_size(shape[1], kw, stride, pad)
        if h < 1 or w < 1 or stride < 1:
            raise ConfigError(f"{where}: shape mismatch, output would be {h}x{w}")
        required[f"{spec.weight_prefix}.w"] = (out, shape[2], kh, kw)
        required[f"{spec.weight_prefix}.b"] = (out,)
        return (h, w, out)
    if kind == "batchnorm":
        for name in spec.weight_names():
            required[name] = (shape[2],)
        return shape
    if kind in ("relu", "residual_begin"):
        return shape
    if kind in ("pool_max", "pool_avg"):
        size, stride = _pool_params(spec)
        if size > shape[0] or size > shape[1] or size < 1 or stride < 1:
            raise ConfigError(f"{where}: pool window {size} does not fit input {shape}")
        return ((shape[0] - size) // stride + 1, (shape[1] - size) // stride + 1, shape[2])
    if kind == "global_avg":
        return (1, 1, shape[2])
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "dense":
        if "units" not in spec.params:
            raise ConfigError(f"{where}: dense needs units=")
        n_in = math.prod(shape)
        required[f"{spec.weight_prefix}.w"] = (spec.params["units"], n_in)
        required[f"{spec.weight_prefix}.b"] = (spec.params["units"],)
        return (spec.params["units"],)
    if kind == "softmax":
        if len(shape) != 1:
            raise ConfigError(f"{where}: softmax needs a vector input, got {shape}")
        return shape
    if kind == "residual_add":
        if ins[0] != ins[1]:
            raise ConfigError(f"{where}: shape mismatch between residual operands {ins[0]} and {ins[1]}")
        return shape
    raise ConfigError(f"{where}: unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelOutput:
    probabilities: np.ndarray
    predicted_class: int
    confidence: float
    trace: list[tuple[int, np.ndarray]] | None = None

    @classmethod
    def from_probabilities(cls, probs, trace=None) -> "ModelOutput":
        probs = np.asarray(probs, dtype=np.float32)
        cls_idx = int(np.argmax(probs))  # first maximum wins ties
        return cls(probs, cls_idx, float(probs[cls_idx]), trace)


@dataclass(frozen=True, eq=False)
class Model:
    """A validated, immutable layer graph with its weights.

    Safe to share between threads: ``run`` never mutates the model.
    """

    layers: tuple[LayerSpec, ...]
    weights: dict[str, np.ndarray]
    shapes: dict[int, tuple]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.shapes[0]

    @property
    def class_count(self) -> int:
        return self.shapes[self.layers[-1].index][0]

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.kind == "conv"]

    def run(self, batch, capture: bool = False):
        """Forward a float batch ``(n, h, w, c)``.

        Returns ``(probabilities (n, k), trace)`` where ``trace`` lists
        ``(layer index, conv output (n, h, w, c))`` in network order, or None.
        """
        x = np.asarray(batch, dtype=tensor.DTYPE)
        if x.ndim != 4 or x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"expected batch of shape (n, {self.input_shape}), got {x.shape}")
        outputs: dict[int, np.ndarray] = {}
        remaining = {s.index: 0 for s in self.layers}
        for s in self.layers:
            for src in s.inputs:
                remaining[src] += 1
        trace = [] if capture else None
        for spec in self.layers:
            args = [outputs[i] for i in spec.inputs]
            y = self._apply(spec, args, x)
            outputs[spec.index] = y
            if capture and spec.kind == "conv":
                trace.append((spec.index, y))
            for src in spec.inputs:
                remaining[src] -= 1
                if remaining[src] == 0 and not capture:
                    del outputs[src]
        return outputs[self.layers[-1].index], trace

    def activations(self, batch) -> dict[int, np.ndarray]:
        """Every layer's output for a float batch, keyed by layer index."""
        x = np.asarray(batch, dtype=tensor.DTYPE)
        if x.ndim != 4 or x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"expected batch of shape (n, {self.input_shape}), got {x.shape}")
        outputs: dict[int, np.ndarray] = {}
        for spec in self.layers:
            outputs[spec.index] = self._apply(spec, [outputs[i] for i in spec.inputs], x)
        return outputs

    def _apply(self, spec: LayerSpec, args: list[np.ndarray], x: np.ndarray) -> np.ndarray:
        kind, w, p = spec.kind, self.weights, spec.weight_prefix
        if kind == "input":
            return x
        a = args[0]
        if kind == "conv":
            _, _, _, stride, pad = _conv_params(spec)
            return tensor.conv2d(a, tensor.KernelBank(w[f"{p}.w"], w[f"{p}.b"]), stride, pad)
        if kind == "batchnorm":
            return tensor.batchnorm_inference(
                a, w[f"{p}.gamma"], w[f"{p}.beta"], w[f"{p}.mean"], w[f"{p}.var"],
                spec.params.get("eps", 1e-5),
            )
        if kind == "relu":
            return tensor.relu(a)
        if kind in ("pool_max", "pool_avg"):
            size, stride = _pool_params(spec)
            return tensor.pool(a, "max" if kind == "pool_max" else "avg", size, stride)
        if kind == "global_avg":
            return tensor.pool(a, "global_avg")
        if kind == "flatten":
            return a.reshape(a.shape[0], -1)
        if kind == "dense":
            return tensor.dense(a.reshape(a.shape[0], -1), w[f"{p}.w"], w[f"{p}.b"])
        if kind == "softmax":
            return tensor.softmax(a)
        if kind == "residual_begin":
            return a
        if kind == "residual_add":
            return tensor.residual_add(a, args[1])
        raise ConfigError(f"unknown layer kind {kind!r}")


def build_model(manifest: str | list[LayerSpec], weights: dict[str, np.ndarray]) -> Model:
    """Validate a manifest against a weight store and return a :class:`Model`."""
    layers = parse_manifest(manifest) if isinstance(manifest, str) else list(manifest)
    shapes, required = infer_shapes(layers)
    for spec in layers:
        for name in spec.weight_names():
            if name not in weights:
                raise ConfigError(f"layer {spec.index} ({spec.name}): missing weight {name!r}")
            got = tuple(np.shape(weights[name]))
            if got != required[name]:
                raise ConfigError(
                    f"layer {spec.index} ({spec.name}): weight {name!r} has shape {got}, "
                    f"expected {required[name]}"
                )
            if name.endswith(".var") and np.any(np.asarray(weights[name]) < 0):
                raise ConfigError(f"layer {spec.index} ({spec.name}): negative running variance")
    frozen = {}
    for name in required:
        arr = np.array(weights[name], dtype=np.float32)
        arr.setflags(write=False)
        frozen[name] = arr
    return Model(tuple(layers), frozen, shapes)


def _to_input(model: Model, image) -> np.ndarray:
    pixels = getattr(image, "normalized", None)
    if pixels is None:
        arr = np.asarray(image)
        pixels = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape != tuple(model.input_shape):
        raise ShapeError(f"image shape {pixels.shape} does not match model input {model.input_shape}")
    return pixels[None]


def forward(model: Model, image, capture: bool = False) -> ModelOutput:
    """Run one image (an :class:`~onepixel.dataset.Image`, uint8 or float array)."""
    probs, trace = model.run(_to_input(model, image), capture=capture)
    if trace is not None:
        trace = [(idx, fm[0]) for idx, fm in trace]
    return ModelOutput.from_probabilities(probs[0], trace)


def predict(model: Model, image) -> tuple[int, float]:
    out = forward(model, image)
    return out.predicted_class, out.confidence
