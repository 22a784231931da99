"""Propagation maps: where a perturbation shows up inside the network.

For every convolutional layer the natural and perturbed feature maps are
compared channel by channel; the per-position maximum (``pm_max``) or mean
(``pm_avg``) of the difference over channels gives a 2-D grid. Differences
are absolute by default; ``absolute=False`` keeps the signed ``nat - adv``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from onepixel.errors import ParameterError, ShapeError
from onepixel.model import Model, _conv_params, _pool_params, _to_input

VARIANTS = ("max", "avg")


def _difference(fm_nat, fm_adv, absolute: bool) -> np.ndarray:
    nat = np.asarray(fm_nat, dtype=np.float32)
    adv = np.asarray(fm_adv, dtype=np.float32)
    if nat.shape != adv.shape:
        raise ShapeError(f"feature maps differ in shape: {nat.shape} vs {adv.shape}")
    if nat.ndim != 3:
        raise ShapeError(f"feature maps must be (H, W, C), got {nat.shape}")
    d = nat - adv
    return np.abs(d) if absolute else d


def pm_max(fm_nat, fm_adv, absolute: bool = True) -> np.ndarray:
    return _difference(fm_nat, fm_adv, absolute).max(axis=2)


def pm_avg(fm_nat, fm_adv, absolute: bool = True) -> np.ndarray:
    d = _difference(fm_nat, fm_adv, absolute)
    return d.mean(axis=2, dtype=np.float64).astype(np.float32)


@dataclass
class LayerGrid:
    index: int
    name: str
    grid: np.ndarray
    # maximum of the natural feature map, used for render scaling
    natural_max: float | None = None


@dataclass
class PropagationMap:
    variant: str
    absolute: bool
    layers: list[LayerGrid] = field(default_factory=list)

    def grid(self, index: int) -> np.ndarray:
        for layer in self.layers:
            if layer.index == index:
                return layer.grid
        raise KeyError(index)


def _traces(model: Model, image, adv_image):
    batch = np.concatenate([_to_input(model, image), _to_input(model, adv_image)])
    _, trace = model.run(batch, capture=True)
    return trace


def propagation_map(model: Model, image, adv_image, variant: str = "max", absolute: bool = True) -> PropagationMap:
    """Per-conv-layer difference grids between ``image`` and ``adv_image``."""
    if variant not in VARIANTS:
        raise ParameterError(f"variant must be one of {VARIANTS}, got {variant!r}")
    op = pm_max if variant == "max" else pm_avg
    names = {s.index: s.name for s in model.layers}
    pm = PropagationMap(variant, absolute)
    for index, fm in _traces(model, image, adv_image):
        pm.layers.append(LayerGrid(index, names[index], op(fm[0], fm[1], absolute), float(fm[0].max())))
    return pm


def scale_for_render(grid, natural) -> np.ndarray:
    """``clip(grid / m, 0, 1)`` where ``m`` is the natural feature map maximum.

    ``natural`` is either that feature map or its maximum. A non-positive
    maximum yields an all-zero grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    maxval = float(np.max(natural))
    if maxval <= 0:
        return np.zeros_like(grid)
    # compare directly so 1.0 appears exactly when grid >= maxval
    with np.errstate(over="ignore"):
        ratio = np.minimum(grid / maxval, np.nextafter(1.0, 0))
    return np.where(grid >= maxval, 1.0, np.clip(ratio, 0.0, 1.0))


def to_gray(scaled) -> np.ndarray:
    """Map values in [0, 1] to 8-bit gray; 1.0 and only 1.0 becomes 255."""
    scaled = np.clip(np.asarray(scaled, dtype=np.float64), 0.0, 1.0)
    gray = np.floor(scaled * 255.0).astype(np.uint8)
    return gray


def aggregate_pms(maps) -> PropagationMap:
    """Element-wise mean of per-layer grids across maps (no rescaling)."""
    maps = list(maps)
    if not maps:
        raise ParameterError("cannot aggregate an empty set of propagation maps")
    first = maps[0]
    layout = [(l.index, l.grid.shape) for l in first.layers]
    for m in maps[1:]:
        if [(l.index, l.grid.shape) for l in m.layers] != layout:
            raise ParameterError("propagation maps come from different architectures")
    out = PropagationMap(first.variant, first.absolute)
    for pos, layer in enumerate(first.layers):
        stack = np.stack([m.layers[pos].grid.astype(np.float64) for m in maps])
        maxima = [m.layers[pos].natural_max for m in maps]
        nat = None if any(v is None for v in maxima) else float(np.mean(maxima))
        out.layers.append(LayerGrid(layer.index, layer.name, stack.mean(axis=0), nat))
    return out


def layer_mean_curve(model: Model, pairs, which: str) -> list[float]:
    """Per-conv-layer averages over a set of ``(image, adv_image)`` pairs.

    ``success``/``fail``: mean over samples of mean |nat - adv| over all
    positions and channels. ``baseline``: mean of the natural activations.
    Which pairs belong to which category is the caller's choice.
    """
    if which not in ("success", "fail", "baseline"):
        raise ParameterError(f"unknown curve category {which!r}")
    pairs = list(pairs)
    if not pairs:
        raise ParameterError(f"no samples in category {which!r}")
    totals: list[float] | None = None
    for image, adv in pairs:
        trace = _traces(model, image, adv)
        if which == "baseline":
            values = [float(fm[0].mean(dtype=np.float64)) for _, fm in trace]
        else:
            values = [float(np.abs(fm[0] - fm[1]).mean(dtype=np.float64)) for _, fm in trace]
        totals = values if totals is None else [a + b for a, b in zip(totals, values)]
    return [t / len(pairs) for t in totals]


# ---------------------------------------------------------------------------
# receptive-field footprints


def _window_any(mask: np.ndarray, kh: int, kw: int, stride: int, pad: int, out_hw) -> np.ndarray:
    if pad:
        mask = np.pad(mask, pad)
    win = sliding_window_view(mask, (kh, kw))[::stride, ::stride]
    return win.any(axis=(2, 3))[: out_hw[0], : out_hw[1]]


def receptive_footprint(model: Model, row: int, col: int) -> dict[int, np.ndarray]:
    """Boolean masks of the positions each spatial layer's outputs can see.

    A position is marked when its receptive field contains input pixel
    ``(row, col)``; derived purely from kernel, stride and padding geometry.
    """
    h, w, _ = model.input_shape
    if not (0 <= row < h and 0 <= col < w):
        raise ParameterError(f"pixel ({row}, {col}) outside {h}x{w} input")
    masks: dict[int, np.ndarray] = {}
    for spec in model.layers:
        shape = model.shapes[spec.index]
        if spec.kind == "input":
            m = np.zeros((h, w), dtype=bool)
            m[row, col] = True
        elif len(shape) != 3:
            continue
        elif spec.kind == "conv":
            _, kh, kw, stride, pad = _conv_params(spec)
            m = _window_any(masks[spec.inputs[0]], kh, kw, stride, pad, shape)
        elif spec.kind in ("pool_max", "pool_avg"):
            size, stride = _pool_params(spec)
            m = _window_any(masks[spec.inputs[0]], size, size, stride, 0, shape)
        elif spec.kind == "global_avg":
            m = np.full((1, 1), bool(masks[spec.inputs[0]].any()))
        elif spec.kind == "residual_add":
            m = masks[spec.inputs[0]] | masks[spec.inputs[1]]
        else:
            m = masks[spec.inputs[0]]
        masks[spec.index] = m
    return masks
