"""Black-box one-pixel attack driven by differential evolution.

A candidate is the 5-vector ``(x, y, r, g, b)``: a pixel position (x is the
column, y the row) and the colour that replaces it, all in continuous space.
Values are only rounded (half up) and clamped when a candidate is applied.

The optimiser is DE/rand/1 without crossover: each parent ``i`` is challenged
by ``x[r1] + F * (x[r2] - x[r3])`` and the child survives iff its fitness is
no worse. Fitness is minimised; see :func:`fitness`.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from onepixel.dataset import Image, LabeledImage
from onepixel.errors import ConfigError, ParameterError
from onepixel.model import Model, predict
from onepixel.rng import Rng

EVAL_CHUNK = 32


def parse_mode(mode: str) -> int | None:
    """``"untargeted"`` -> None, ``"targeted:<t>"`` -> t."""
    if mode == "untargeted":
        return None
    kind, sep, target = mode.partition(":")
    if kind == "targeted" and sep:
        try:
            return int(target)
        except ValueError:
            pass
    raise ConfigError(f"invalid attack mode {mode!r}; use 'untargeted' or 'targeted:<class>'")


@dataclass(frozen=True)
class Candidate:
    x: float
    y: float
    r: float
    g: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.r, self.g, self.b], dtype=np.float64)

    @classmethod
    def from_array(cls, v) -> "Candidate":
        return cls(*(float(t) for t in v))


@dataclass(frozen=True)
class AttackConfig:
    population_size: int = 400
    max_generations: int = 100
    f_weight: float = 0.5
    early_stop: float = 0.05
    mode: str = "untargeted"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 4:
            raise ConfigError("population_size must be at least 4 for DE/rand/1")
        if self.max_generations < 0:
            raise ConfigError("max_generations must be non-negative")
        # F = 0 is allowed as a degenerate (no-move) setting
        if not 0 <= self.f_weight <= 2:
            raise ConfigError("differential weight F must lie in [0, 2]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        parse_mode(self.mode)

    @property
    def target(self) -> int | None:
        return parse_mode(self.mode)


@dataclass
class AttackOutcome:
    sample_id: str
    label: int
    original_class: int
    original_confidence: float
    skipped: bool = False
    success: bool = False
    adversarial_class: int | None = None
    adversarial_confidence: float | None = None
    candidate: Candidate | None = None
    generations: int = 0
    evaluations: int = 0
    best_fitness: float | None = None
    history: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# candidates


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5)


def _pixel_index(pop: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cols = np.clip(_round_half_up(pop[:, 0]), 0, width - 1).astype(np.intp)
    rows = np.clip(_round_half_up(pop[:, 1]), 0, height - 1).astype(np.intp)
    colors = np.clip(_round_half_up(pop[:, 2:5]), 0, 255).astype(np.uint8)
    return rows, cols, colors


def apply_population(pixels: np.ndarray, pop: np.ndarray) -> np.ndarray:
    """Stack of copies of ``pixels`` (h, w, 3), each with one candidate applied."""
    pop = np.atleast_2d(np.asarray(pop, dtype=np.float64))
    h, w = pixels.shape[:2]
    rows, cols, colors = _pixel_index(pop, h, w)
    batch = np.repeat(pixels[None], len(pop), axis=0)
    batch[np.arange(len(pop)), rows, cols] = colors
    return batch


def apply_candidate(image: Image, c: Candidate) -> Image:
    """Copy of ``image`` with the candidate's pixel replaced by its colour."""
    return Image(apply_population(image.pixels, c.as_array()[None])[0])


def _probabilities(model: Model, batch_u8: np.ndarray, workers: int = 1) -> np.ndarray:
    # Fixed chunking keeps serial and threaded runs bit-identical.
    chunks = [batch_u8[i : i + EVAL_CHUNK] for i in range(0, len(batch_u8), EVAL_CHUNK)]

    def run(chunk):
        return model.run(chunk.astype(np.float32) / np.float32(255.0))[0]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def _objective(probs: np.ndarray, true_class: int, target: int | None) -> np.ndarray:
    if target is None:
        return probs[:, true_class].astype(np.float64)
    return -probs[:, target].astype(np.float64)


def _check_classes(model: Model, true_class: int, target: int | None) -> None:
    k = model.class_count
    if not 0 <= true_class < k:
        raise ParameterError(f"true_class {true_class} outside 0..{k - 1}")
    if target is not None and not 0 <= target < k:
        raise ParameterError(f"target class {target} outside 0..{k - 1}")


def evaluate_population(
    model: Model, image: Image, true_class: int, pop: np.ndarray, mode: str = "untargeted", workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Fitness and softmax outputs for every candidate row of ``pop``."""
    target = parse_mode(mode)
    _check_classes(model, true_class, target)
    probs = _probabilities(model, apply_population(image.pixels, pop), workers)
    return _objective(probs, true_class, target), probs


def fitness(model: Model, image: Image, true_class: int, c: Candidate, mode: str = "untargeted") -> float:
    """Value to minimise: ``f(x')[true]`` untargeted, ``-f(x')[t]`` targeted."""
    fit, _ = evaluate_population(model, image, true_class, c.as_array()[None], mode)
    return float(fit[0])


def is_adversarial(model: Model, original_class: int, image: Image) -> bool:
    return predict(model, image)[0] != original_class


# ---------------------------------------------------------------------------
# differential evolution


def _bounds(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    # same half-open box as de_init, so positions stay < W and < H
    lo = np.zeros(5)
    hi = np.array([np.nextafter(width, 0), np.nextafter(height, 0), 255, 255, 255], dtype=np.float64)
    return lo, hi


def de_init(config: AttackConfig, dims: tuple[int, int], seed: int | Rng) -> np.ndarray:
    """Initial population ``(pop, 5)``.

    Positions are uniform over ``[0, W) x [0, H)``; colours are N(128, 127)
    clamped to [0, 255]. ``dims`` is ``(height, width)``.
    """
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    height, width = dims
    n = config.population_size
    pop = np.empty((n, 5))
    pop[:, 0] = rng.uniform(n, 0, width)
    pop[:, 1] = rng.uniform(n, 0, height)
    pop[:, 2:5] = np.clip(rng.normal(3 * n, 128.0, 127.0).reshape(n, 3), 0, 255)
    return pop


def _draw_parents(rng: Rng, n: int) -> np.ndarray:
    """For each i, three distinct indices != i, sampled without replacement."""
    u = rng.uniform(3 * n).reshape(n, 3)
    out = np.empty((n, 3), dtype=np.intp)
    for i in range(n):
        taken = [i]
        for j in range(3):
            k = min(int(u[i, j] * (n - len(taken))), n - len(taken) - 1)
            for t in sorted(taken):
                if k >= t:
                    k += 1
            taken.append(k)
            out[i, j] = k
    return out


def _step(pop, fit, model, image, true_class, config, rng):
    n = len(pop)
    if n < 4:
        raise ConfigError("population must have at least 4 members")
    idx = _draw_parents(rng, n)
    mutants = pop[idx[:, 0]] + config.f_weight * (pop[idx[:, 1]] - pop[idx[:, 2]])
    lo, hi = _bounds(image.height, image.width)
    mutants = np.clip(mutants, lo, hi)
    child_fit, child_probs = evaluate_population(model, image, true_class, mutants, config.mode, config.workers)
    keep = child_fit <= fit
    new_pop = np.where(keep[:, None], mutants, pop)
    new_fit = np.where(keep, child_fit, fit)
    return new_pop, new_fit, keep, child_probs


def de_step(pop, fitnesses, model: Model, image: Image, true_class: int, config: AttackConfig, rng: Rng):
    """One generation of DE/rand/1 with one-to-one elitist selection.

    Returns the new ``(population, fitnesses)``; inputs are not modified.
    """
    pop = np.asarray(pop, dtype=np.float64)
    fit = np.asarray(fitnesses, dtype=np.float64)
    new_pop, new_fit, _, _ = _step(pop, fit, model, image, true_class, config, rng)
    return new_pop, new_fit


def _should_stop(probs_best: np.ndarray, true_class: int, target: int | None, threshold: float) -> bool:
    if target is None:
        return probs_best[true_class] < threshold
    return int(np.argmax(probs_best)) == target


def one_pixel_attack(model: Model, sample: LabeledImage, config: AttackConfig) -> AttackOutcome:
    """Attack one sample; pre-misclassified samples are returned as skipped.

    Randomness comes from a sub-stream named after the sample id, so the result
    for a sample does not depend on which other samples are attacked.
    """
    image = sample.image
    probs0 = _probabilities(model, image.pixels[None])[0]
    orig_class = int(np.argmax(probs0))
    outcome = AttackOutcome(sample.id, sample.label, orig_class, float(probs0[orig_class]))
    if orig_class != sample.label:
        outcome.skipped = True
        return outcome

    target = config.target
    _check_classes(model, sample.label, target)
    rng = Rng(config.seed).spawn(f"attack/{sample.id}")
    pop = de_init(config, (image.height, image.width), rng)
    fit, probs = evaluate_population(model, image, sample.label, pop, config.mode, config.workers)
    evals = len(pop)
    best = int(np.argmin(fit))
    best_probs = probs[best]
    history = [float(fit[best])]
    gens = 0
    while gens < config.max_generations and not _should_stop(best_probs, sample.label, target, config.early_stop):
        pop, fit, keep, child_probs = _step(pop, fit, model, image, sample.label, config, rng)
        probs = np.where(keep[:, None], child_probs, probs)
        evals += len(pop)
        gens += 1
        best = int(np.argmin(fit))
        best_probs = probs[best]
        history.append(float(fit[best]))

    adv_class = int(np.argmax(best_probs))
    outcome.candidate = Candidate.from_array(pop[best])
    outcome.adversarial_class = adv_class
    outcome.adversarial_confidence = float(best_probs[adv_class])
    outcome.success = adv_class != orig_class
    outcome.generations = gens
    outcome.evaluations = evals
    outcome.best_fitness = float(fit[best])
    outcome.history = history
    return outcome


def attack_success_rate(outcomes) -> float:
    """Successes over attempted (non-skipped) samples; NaN if none attempted."""
    attempted = [o for o in outcomes if not o.skipped]
    if not attempted:
        return math.nan
    return sum(o.success for o in attempted) / len(attempted)
