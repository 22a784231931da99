"""Position sensitivity of successful one-pixel attacks.

Each successful attack's colour is re-applied (a) at a uniformly random pixel
of the original image and (b) at the pixels adjacent to the attacked one, and
the fraction of those re-applications that still flip the class is reported
next to the original attack success rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from onepixel.attack import AttackOutcome, Candidate, apply_population
from onepixel.errors import ParameterError
from onepixel.model import Model
from onepixel.rng import Rng

MODES = ("all_neighbors", "single_random_neighbor")
CONDITIONS = ("original", "random_pixel", "nearby_pixel")

_NEIGHBOR_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def nearby_positions(pos: tuple[int, int], width: int, height: int) -> list[tuple[int, int]]:
    """In-bounds Moore neighbours of ``pos = (x, y)``, excluding ``pos`` itself."""
    x, y = pos
    if not (0 <= x < width and 0 <= y < height):
        raise ParameterError(f"position {pos} outside {width}x{height} image")
    return [
        (x + dx, y + dy)
        for dy, dx in _NEIGHBOR_OFFSETS
        if 0 <= x + dx < width and 0 <= y + dy < height
    ]


@dataclass
class ConditionCount:
    attempts: int = 0
    successes: int = 0

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass
class LocalityDetail:
    sample_id: str
    condition: str
    x: int
    y: int
    predicted: int
    success: bool


@dataclass
class LocalityReport:
    mode: str
    seed: int
    counts: dict[str, ConditionCount] = field(default_factory=lambda: {c: ConditionCount() for c in CONDITIONS})
    details: list[LocalityDetail] = field(default_factory=list)

    def rate(self, condition: str) -> float:
        return self.counts[condition].rate


def _pixel_position(c: Candidate, width: int, height: int) -> tuple[int, int]:
    x = min(max(int(np.floor(c.x + 0.5)), 0), width - 1)
    y = min(max(int(np.floor(c.y + 0.5)), 0), height - 1)
    return x, y


def run_locality_experiment(
    model: Model,
    outcomes,
    samples,
    mode: str = "all_neighbors",
    seed: int = 0,
) -> LocalityReport:
    """Re-apply each successful attack colour at random and neighbouring pixels.

    ``outcomes`` may include skipped and failed attacks; they only feed the
    ``original`` row. ``samples`` maps sample id to the unperturbed
    :class:`~onepixel.dataset.LabeledImage` (or is any iterable of them).
    Success of a re-application means the prediction differs from the
    original class.
    """
    if mode not in MODES:
        raise ParameterError(f"locality mode must be one of {MODES}, got {mode!r}")
    if not isinstance(samples, dict):
        samples = {s.id: s for s in samples}
    outcomes = [o for o in outcomes if not o.skipped]
    successes: list[AttackOutcome] = [o for o in outcomes if o.success]
    if not successes:
        raise ParameterError("locality experiment needs at least one successful attack")

    report = LocalityReport(mode, seed)
    report.counts["original"] = ConditionCount(len(outcomes), len(successes))
    rng = Rng(seed).spawn("locality")

    for o in successes:
        try:
            image = samples[o.sample_id].image
        except KeyError:
            raise ParameterError(f"no image for sample {o.sample_id!r}") from None
        w, h = image.width, image.height
        c = o.candidate
        rx = int(rng.integers(w, 1)[0])
        ry = int(rng.integers(h, 1)[0])
        neighbors = nearby_positions(_pixel_position(c, w, h), w, h)
        if mode == "single_random_neighbor":
            neighbors = [neighbors[int(rng.integers(len(neighbors), 1)[0])]]

        positions = [("random_pixel", rx, ry)] + [("nearby_pixel", x, y) for x, y in neighbors]
        pop = np.array([[x, y, c.r, c.g, c.b] for _, x, y in positions], dtype=np.float64)
        batch = apply_population(image.pixels, pop).astype(np.float32) / np.float32(255.0)
        preds = np.argmax(model.run(batch)[0], axis=1)
        for (cond, x, y), pred in zip(positions, preds):
            hit = int(pred) != o.original_class
            report.counts[cond].attempts += 1
            report.counts[cond].successes += hit
            report.details.append(LocalityDetail(o.sample_id, cond, x, y, int(pred), hit))
    return report
