"""``onepixel`` command line.

Subcommands: ``attack``, ``propmap``, ``locality``, ``aggregate`` plus the
fixture helpers ``gen-weights`` and ``synth``. Every command takes the same
model/data flags so that later stages can rebuild the exact inputs of an
earlier ``attack`` run from its flags and ``outcomes.csv``.

Exit codes: 0 ok, 2 unreadable or invalid inputs, 3 nothing to work on
(no samples / no successes / empty category), 4 unknown sample id.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from onepixel import attack as atk
from onepixel import dataset, locality, model, propmap
from onepixel.errors import OnePixelError

log = logging.getLogger("onepixel")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_UNKNOWN_ID = 0, 2, 3, 4

OUTCOME_FIELDS = [
    "id", "label", "predicted", "skipped", "success", "adv_class",
    "x", "y", "r", "g", "b", "generations", "evals",
]


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument parsing


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _mode(value: str) -> str:
    try:
        atk.parse_mode(value)
    except OnePixelError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def _variant(value: str) -> str:
    if value not in ("pmmax", "pmavg"):
        raise argparse.ArgumentTypeError("expected 'pmmax' or 'pmavg'")
    return value[2:]


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and data")
    g.add_argument("--manifest", default="lenet-small",
                   help="bundled manifest name (%s) or path" % ", ".join(model.BUNDLED_MANIFESTS))
    g.add_argument("--weights", help=".opxw weight file (default: seeded fixture weights)")
    g.add_argument("--weight-seed", type=int, default=42, help="seed for fixture weights when --weights is absent")
    g.add_argument("--dataset", help="CIFAR-10 binary batch or a P6 .ppm image")
    g.add_argument("--label", type=int, help="label for a .ppm dataset (default: model prediction)")
    g.add_argument("--synth-seed", type=int, help="use the synthetic dataset with this seed")
    g.add_argument("--samples", type=int, help="number of samples to use (required for synthetic data)")
    g = p.add_argument_group("attack")
    g.add_argument("--pop", type=int, default=400, help="DE population size")
    g.add_argument("--gens", type=int, default=100, help="maximum DE generations")
    g.add_argument("--f-weight", type=float, default=0.5, help="DE differential weight F")
    g.add_argument("--early-stop", type=float, default=0.05, help="untargeted stop threshold on true-class probability")
    g.add_argument("--mode", type=_mode, default="untargeted", help="untargeted | targeted:<t>")
    g.add_argument("--workers", type=int, default=1, help="threads for fitness evaluation")
    g = p.add_argument_group("maps and output")
    g.add_argument("--variant", type=_variant, default="pmmax", help="pmmax | pmavg")
    g.add_argument("--absolute", type=_on_off, default=True, help="absolute differences on|off")
    g.add_argument("--scale", type=_on_off, default=True, help="scale heatmaps by the layer's natural maximum on|off")
    g.add_argument("--figures", type=_on_off, default=True, help="also render matplotlib PNG figures on|off")
    g.add_argument("--seed", type=int, default=0, help="master seed for attack and locality streams")
    g.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onepixel", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="run one-pixel attacks over a dataset")
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("propmap", help="propagation map for one sample")
    _add_common(p)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--candidate", help="x,y,r,g,b (default: taken from --outcomes)")
    p.add_argument("--outcomes", help="outcomes.csv from an attack run")
    p.set_defaults(func=cmd_propmap)

    p = sub.add_parser("locality", help="random/nearby pixel re-application experiment")
    _add_common(p)
    p.add_argument("--outcomes", required=True)
    p.add_argument("--locality-mode", choices=locality.MODES, default="all_neighbors")
    p.set_defaults(func=cmd_locality)

    p = sub.add_parser("aggregate", help="average propagation maps and per-layer curves")
    _add_common(p)
    p.add_argument("--outcomes", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("gen-weights", help="write seeded fixture weights for a manifest")
    p.add_argument("--manifest", default="lenet-small")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="destination .opxw file")
    p.set_defaults(func=cmd_gen_weights)

    p = sub.add_parser("synth", help="write a synthetic dataset as a CIFAR-10 binary batch")
    p.add_argument("--synth-seed", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True, help="destination .bin file")
    p.set_defaults(func=cmd_synth)
    return parser


# ---------------------------------------------------------------------------
# shared loading


def load_model(args) -> model.Model:
    try:
        text = model.read_manifest(args.manifest)
    except OSError as exc:
        raise CliExit(EXIT_INPUT, f"cannot read manifest {args.manifest}: {exc}") from None
    try:
        if args.weights:
            try:
                weights = model.read_weights_file(args.weights)
            except OSError as exc:
                raise CliExit(EXIT_INPUT, f"cannot read weights {args.weights}: {exc}") from None
        else:
            weights = dataset.gen_weights(args.weight_seed, text)
        return model.build_model(text, weights)
    except OnePixelError as exc:
        raise CliExit(EXIT_INPUT, str(exc)) from None


def load_samples(args, net: model.Model) -> list[dataset.LabeledImage]:
    if args.samples is not None and args.samples < 0:
        raise CliExit(EXIT_INPUT, "--samples must be non-negative")
    if args.dataset:
        path = Path(args.dataset)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise CliExit(EXIT_INPUT, f"cannot read dataset {path}: {exc}") from None
        try:
            if path.suffix.lower() == ".ppm":
                img = dataset.read_ppm(data)
                label = args.label if args.label is not None else model.predict(net, img)[0]
                samples = [dataset.LabeledImage(img, label, path.stem)]
            else:
                samples = dataset.read_cifar10(data)
        except OnePixelError as exc:
            raise CliExit(EXIT_INPUT, f"{path}: {exc}") from None
        return samples if args.samples is None else samples[: args.samples]
    if args.synth_seed is None:
        raise CliExit(EXIT_INPUT, "either --dataset or --synth-seed is required")
    if args.samples is None:
        raise CliExit(EXIT_INPUT, "--samples is required with --synth-seed")
    if args.samples == 0:
        return []
    h, w, _ = net.input_shape
    if h != w:
        raise CliExit(EXIT_INPUT, "synthetic data needs a square model input")
    return dataset.synth_dataset(args.synth_seed, args.samples, net.class_count, side=h)


def attack_config(args) -> atk.AttackConfig:
    try:
        return atk.AttackConfig(
            population_size=args.pop,
            max_generations=args.gens,
            f_weight=args.f_weight,
            early_stop=args.early_stop,
            mode=args.mode,
            seed=args.seed,
            workers=args.workers,
        )
    except OnePixelError as exc:
        raise CliExit(EXIT_INPUT, str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(v: float) -> str:
    return repr(float(v))


def grid_csv(grid) -> str:
    grid = np.asarray(grid)
    header = ["row"] + [f"c{j}" for j in range(grid.shape[1])]
    rows = [[i] + [_fmt(v) for v in grid[i]] for i in range(grid.shape[0])]
    return _csv_text(header, rows)


# ---------------------------------------------------------------------------
# outcomes.csv


def outcome_row(o: atk.AttackOutcome) -> list:
    c = o.candidate
    cand = [_fmt(c.x), _fmt(c.y), _fmt(c.r), _fmt(c.g), _fmt(c.b)] if c is not None else [""] * 5
    return [
        o.sample_id, o.label, o.original_class, int(o.skipped), int(o.success),
        "" if o.adversarial_class is None else o.adversarial_class,
        *cand, o.generations, o.evaluations,
    ]


def outcomes_csv(outcomes) -> str:
    return _csv_text(OUTCOME_FIELDS, [outcome_row(o) for o in outcomes])


def read_outcomes(path) -> list[atk.AttackOutcome]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliExit(EXIT_INPUT, f"cannot read outcomes {path}: {exc}") from None
    reader = csv.DictReader(io.StringIO(text, newline=""))
    if reader.fieldnames is None or list(reader.fieldnames) != OUTCOME_FIELDS:
        raise CliExit(EXIT_INPUT, f"{path}: unexpected header {reader.fieldnames}")
    out = []
    try:
        for row in reader:
            o = atk.AttackOutcome(row["id"], int(row["label"]), int(row["predicted"]), float("nan"))
            o.skipped = row["skipped"] == "1"
            o.success = row["success"] == "1"
            if not o.skipped:
                o.adversarial_class = int(row["adv_class"])
                o.candidate = atk.Candidate(*(float(row[k]) for k in "xyrgb"))
            o.generations = int(row["generations"])
            o.evaluations = int(row["evals"])
            out.append(o)
    except (KeyError, ValueError) as exc:
        raise CliExit(EXIT_INPUT, f"{path}: malformed row {reader.line_num}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_attack(args) -> int:
    net = load_model(args)
    samples = load_samples(args, net)
    config = attack_config(args)
    out = _out_dir(args)
    if not samples:
        raise CliExit(EXIT_EMPTY, "no samples to attack")
    outcomes = []
    for s in samples:
        o = atk.one_pixel_attack(net, s, config)
        log.info("%s label=%d pred=%d skipped=%s success=%s", s.id, s.label, o.original_class, o.skipped, o.success)
        outcomes.append(o)
    attempted = [o for o in outcomes if not o.skipped]
    successes = sum(o.success for o in attempted)
    rate = successes / len(attempted) if attempted else ""
    summary = _csv_text(
        ["samples", "skipped", "attempted", "successes", "success_rate"],
        [[len(outcomes), len(outcomes) - len(attempted), len(attempted), successes, rate if rate == "" else _fmt(rate)]],
    )
    _write_text(out / "outcomes.csv", outcomes_csv(outcomes))
    _write_text(out / "summary.csv", summary)
    print(f"attacked {len(attempted)}/{len(outcomes)} samples, {successes} successful", file=sys.stderr)
    if not attempted:
        raise CliExit(EXIT_EMPTY, "every sample was misclassified before the attack")
    return EXIT_OK


def _sample_map(samples) -> dict[str, dataset.LabeledImage]:
    return {s.id: s for s in samples}


def _lookup(samples: dict, sample_id: str) -> dataset.LabeledImage:
    try:
        return samples[sample_id]
    except KeyError:
        raise CliExit(EXIT_UNKNOWN_ID, f"unknown sample id {sample_id!r}") from None


def _parse_candidate(text: str) -> atk.Candidate:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        values = []
    if len(values) != 5:
        raise CliExit(EXIT_INPUT, f"--candidate needs five comma-separated numbers, got {text!r}")
    return atk.Candidate(*values)


def _render_gray(layer: propmap.LayerGrid, scale: bool) -> np.ndarray:
    if scale:
        return propmap.to_gray(propmap.scale_for_render(layer.grid, layer.natural_max))
    peak = float(np.max(layer.grid))
    # unscaled maps are stretched to their own maximum for viewing
    return propmap.to_gray(layer.grid / peak if peak > 0 else np.zeros_like(layer.grid))


def _write_map(out: Path, pm: propmap.PropagationMap, prefix: str, scale: bool) -> None:
    for layer in pm.layers:
        _write_text(out / f"{prefix}layer_{layer.index}.csv", grid_csv(layer.grid))
        (out / f"{prefix}layer_{layer.index}.pgm").write_bytes(dataset.write_pgm(_render_gray(layer, scale)))


def cmd_propmap(args) -> int:
    net = load_model(args)
    samples = _sample_map(load_samples(args, net))
    if args.candidate:
        cand = _parse_candidate(args.candidate)
    elif args.outcomes:
        rows = {o.sample_id: o for o in read_outcomes(args.outcomes)}
        if args.sample_id not in rows:
            raise CliExit(EXIT_UNKNOWN_ID, f"sample {args.sample_id!r} not in {args.outcomes}")
        cand = rows[args.sample_id].candidate
        if cand is None:
            raise CliExit(EXIT_EMPTY, f"sample {args.sample_id!r} was skipped; no candidate to map")
    else:
        raise CliExit(EXIT_INPUT, "propmap needs --candidate or --outcomes")
    sample = _lookup(samples, args.sample_id)
    out = _out_dir(args)

    adv = atk.apply_candidate(sample.image, cand)
    pm = propmap.propagation_map(net, sample.image, adv, args.variant, args.absolute)
    _write_map(out, pm, "", args.scale)
    if args.figures:
        from onepixel import plotting

        scaled = [propmap.scale_for_render(l.grid, l.natural_max) for l in pm.layers] if args.scale else None
        plotting.plot_propagation_map(pm, out / "propmap.png", scaled, adv.pixels,
                                      title=f"PM{args.variant} {sample.id}")
    return EXIT_OK


def _rebuild(args):
    net = load_model(args)
    samples = _sample_map(load_samples(args, net))
    outcomes = read_outcomes(args.outcomes)
    for o in outcomes:
        _lookup(samples, o.sample_id)
    return net, samples, outcomes


def cmd_locality(args) -> int:
    net, samples, outcomes = _rebuild(args)
    if not any(o.success for o in outcomes):
        raise CliExit(EXIT_EMPTY, "outcomes contain no successful attack")
    report = locality.run_locality_experiment(net, outcomes, samples, args.locality_mode, args.seed)
    out = _out_dir(args)
    rows = [[c, n.attempts, n.successes, _fmt(n.rate)] for c, n in report.counts.items()]
    _write_text(out / "locality.csv", _csv_text(["condition", "attempts", "successes", "rate"], rows))
    detail = [[d.sample_id, d.condition, d.x, d.y, d.predicted, int(d.success)] for d in report.details]
    _write_text(out / "locality_detail.csv",
                _csv_text(["id", "condition", "x", "y", "predicted", "success"], detail))
    if args.figures:
        from onepixel import plotting

        plotting.plot_locality(report, out / "locality.png")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    net, samples, outcomes = _rebuild(args)
    attempted = [o for o in outcomes if not o.skipped]
    groups = {
        "success": [o for o in attempted if o.success],
        "fail": [o for o in attempted if not o.success],
    }
    for name, group in groups.items():
        if not group:
            raise CliExit(EXIT_EMPTY, f"no {name} outcomes to aggregate")
    out = _out_dir(args)
    pairs = {}
    for name, group in groups.items():
        pairs[name] = [
            (samples[o.sample_id].image, atk.apply_candidate(samples[o.sample_id].image, o.candidate))
            for o in group
        ]
        maps = [propmap.propagation_map(net, a, b, args.variant, args.absolute) for a, b in pairs[name]]
        agg = propmap.aggregate_pms(maps)
        _write_map(out, agg, f"{name}_", scale=False)
        if args.figures:
            from onepixel import plotting

            plotting.plot_propagation_map(agg, out / f"{name}_aggregate.png",
                                          title=f"mean PM{args.variant} over {len(maps)} {name} attacks")
    success = propmap.layer_mean_curve(net, pairs["success"], "success")
    fail = propmap.layer_mean_curve(net, pairs["fail"], "fail")
    baseline = propmap.layer_mean_curve(net, pairs["success"] + pairs["fail"], "baseline")
    layers = [s for s in net.layers if s.kind == "conv"]
    rows = [[s.index, _fmt(a), _fmt(b), _fmt(c)] for s, a, b, c in zip(layers, success, fail, baseline)]
    _write_text(out / "layer_curve.csv",
                _csv_text(["layer", "success_mean", "fail_mean", "baseline_mean"], rows))
    if args.figures:
        from onepixel import plotting

        plotting.plot_layer_curve([s.name for s in layers], success, fail, baseline, out / "layer_curve.png")
    return EXIT_OK


def cmd_gen_weights(args) -> int:
    try:
        text = model.read_manifest(args.manifest)
        store = dataset.gen_weights(args.seed, text)
    except OSError as exc:
        raise CliExit(EXIT_INPUT, f"cannot read manifest {args.manifest}: {exc}") from None
    except OnePixelError as exc:
        raise CliExit(EXIT_INPUT, str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.write_weights_file(args.out, store)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.samples < 1:
        raise CliExit(EXIT_EMPTY, "--samples must be at least 1")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(dataset.write_cifar10(dataset.synth_dataset(args.synth_seed, args.samples)))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliExit as exc:
        print(f"onepixel {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
