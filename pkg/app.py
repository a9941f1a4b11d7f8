"""
geodecomp command-line program.
Subcommands: mean, decompose, classify, robustness, tune-temp, synth, project.
Results go to stdout as canonical JSON (tables with --pretty); logs go to stderr.
"""
import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

from config.config import (
    DEFAULT_CURVATURE,
    DEFAULT_TEMPERATURE,
    DEFAULT_TEMPERATURE_GRID,
    LOG_LEVEL,
    MEAN_LEARNING_RATE,
    MEAN_MAX_ITERS,
    MEAN_TOLERANCE,
    SIGLIP_LOGIT_BIAS,
)
from src.data_loader import (
    load_labeled_set,
    read_anchor_bank,
    read_decomposition,
    read_embeddings,
    read_labels,
    read_space,
    read_split,
    read_weights,
    write_decomposition,
    write_embeddings,
    write_labels,
    write_space,
)
from src.decompose import (
    decompose_simple,
    decompose_sparse,
    decompose_weighted,
    residuals,
    subspace_rank,
    tangent_objective,
)
from src.errors import ConfigError, GeodecompError
from src.filters import stratified_subsample
from src.karcher import MeanConfig, intrinsic_mean
from src.manifold import Geometry, GeometryKind
from src.metrics import (
    auc_ratio,
    bank_from_anchors,
    bank_from_decomposition,
    czsl_evaluate,
    group_evaluate,
    object_bank,
)
from src.noise import build_noise, tune_temperature
from src.report_generator import canonical_json, render_pretty
from src.synthlab import SynthSpec, generate
from src.utils import atomic_write_bytes, get_csv_bytes
from src.visualizations import PROJECTION_SOURCES, pca_project, projection_source

logger = logging.getLogger("geodecomp")

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE = 2


@dataclass
class RunConfig:
    """Validated flags of one invocation."""

    command: str
    seed: int = 0
    pretty: bool = False
    timing: bool = False
    verbosity: int = 0
    curvature: float = DEFAULT_CURVATURE
    args: argparse.Namespace = field(default_factory=argparse.Namespace)
    timings: dict = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - start


# =============================================================================
# Argument parsing
# =============================================================================
def _float_list(text: str) -> list:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("the list is empty")
    return values


def _add_mean_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=MEAN_LEARNING_RATE, help="mean step size")
    p.add_argument("--tol", type=float, default=MEAN_TOLERANCE, help="mean stopping tolerance")
    p.add_argument("--max-iters", type=int, default=MEAN_MAX_ITERS)
    p.add_argument("--mean-subsample", type=int, default=None, help="estimate the mean from N random rows")


def _add_geometry_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--geometry", choices=[k.value for k in GeometryKind], default=None,
        help="reinterpret the stored rows (euclidean gives the linear baseline)",
    )


def _add_noise_flags(p: argparse.ArgumentParser, modes: Sequence[str]) -> None:
    p.add_argument("--noise", choices=list(modes), default=modes[0])
    p.add_argument("--anchors", help="GDE1 file with one anchor embedding per tuple")
    p.add_argument("--anchor-labels", help="label TSV for --anchors")
    p.add_argument("--anchor-decomposition", help="decomposition file whose composed tuples serve as anchors")
    p.add_argument("--logit-bias", type=float, default=SIGLIP_LOGIT_BIAS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodecomp", description="Geodesically decomposable embeddings")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pretty", action="store_true", help="print tables instead of JSON")
    parser.add_argument("--timing", action="store_true", help="report stage timings on stderr")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--curvature", type=float, default=DEFAULT_CURVATURE, help="Lorentz curvature c")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mean", help="weighted intrinsic mean of an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--weights", help="weights file (one per row) or 'uniform'")
    _add_geometry_flag(p)
    _add_mean_flags(p)

    p = sub.add_parser("decompose", help="fit primitive directions to labeled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--space", help="composition space JSON (default: inferred from labels)")
    p.add_argument("--method", choices=["simple", "weighted", "sparse"], default="sparse")
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--train-fraction", type=float, default=1.0, help="keep this fraction of each tuple's rows")
    p.add_argument("--out", required=True, help="decomposition file to write")
    _add_noise_flags(p, ["uniform", "softmax", "sigmoid"])
    _add_geometry_flag(p)
    _add_mean_flags(p)

    p = sub.add_parser("classify", help="compositional zero-shot evaluation")
    p.add_argument("--decomposition")
    p.add_argument("--anchors", help="baseline: GDE1 file of per-tuple anchors")
    p.add_argument("--anchor-labels")
    p.add_argument("--space", help="composition space JSON for --anchors")
    p.add_argument("--test-embeddings", required=True)
    p.add_argument("--test-labels", required=True)
    p.add_argument("--seen", help="split JSON with seen_pairs / test_pairs / open_world")
    p.add_argument("--world", choices=["closed", "open"], default="closed")
    p.add_argument("--bias-grid", choices=["exact", "uniform"], default="exact")
    p.add_argument("--baseline-auc", type=float, help="also report the AUC ratio against this baseline")
    p.add_argument("--curve", action="store_true", help="include the full bias curve")

    p = sub.add_parser("robustness", help="worst-group accuracy of single-factor classification")
    p.add_argument("--decomposition", required=True)
    p.add_argument("--test-embeddings", required=True)
    p.add_argument("--test-labels", required=True)
    p.add_argument("--factor", default=None, help="factor to predict (default: the last one)")
    p.add_argument("--groups", help="split JSON whose 'groups' maps sample ids to groups")

    p = sub.add_parser("tune-temp", help="grid search of the noise temperature")
    p.add_argument("--train-embeddings", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--val-embeddings", required=True)
    p.add_argument("--val-labels", required=True)
    p.add_argument("--space")
    p.add_argument("--grid", type=_float_list, default=list(DEFAULT_TEMPERATURE_GRID))
    p.add_argument("--objective", choices=["auc", "worst-group"], default="auc")
    p.add_argument("--world", choices=["closed", "open"], default="closed")
    p.add_argument("--include-baseline", action="store_true", help="also score uniform noise")
    _add_noise_flags(p, ["softmax", "sigmoid"])
    _add_mean_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic decomposable data set")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-embeddings", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--out-space", help="also write the composition space JSON")

    p = sub.add_parser("project", help="tangent PCA coordinates for plotting")
    p.add_argument("--decomposition", required=True)
    p.add_argument("--dim", type=int, choices=[2, 3], default=2)
    p.add_argument("--source", choices=list(PROJECTION_SOURCES), default="denoised")
    p.add_argument("--out", required=True, help="CSV of coordinates")
    return parser


def validate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> RunConfig:
    """Cross-flag checks, all before touching any file."""
    if args.curvature <= 0:
        parser.error("--curvature must be positive")
    if args.command in ("decompose", "tune-temp"):
        needs_anchors = args.noise != "uniform"
        has_files = bool(args.anchors) or bool(args.anchor_labels)
        if bool(args.anchors) != bool(args.anchor_labels):
            parser.error("--anchors and --anchor-labels go together")
        if has_files and args.anchor_decomposition:
            parser.error("use either --anchors/--anchor-labels or --anchor-decomposition")
        if needs_anchors and not (has_files or args.anchor_decomposition):
            parser.error(f"--noise {args.noise} needs --anchors/--anchor-labels or --anchor-decomposition")
    if args.command == "decompose":
        if args.temperature <= 0:
            parser.error("--temperature must be positive")
        if not 0 < args.train_fraction <= 1:
            parser.error("--train-fraction must lie in (0, 1]")
    if args.command == "tune-temp" and any(t <= 0 for t in args.grid):
        parser.error("--grid temperatures must be positive")
    if args.command == "classify":
        if bool(args.decomposition) == bool(args.anchors):
            parser.error("classify needs exactly one of --decomposition or --anchors")
        if args.anchors and not (args.anchor_labels and args.space and args.seen):
            parser.error("--anchors needs --anchor-labels, --space and --seen")
        if args.baseline_auc is not None and args.baseline_auc < 0:
            parser.error("--baseline-auc must be nonnegative")
    return RunConfig(
        command=args.command,
        seed=args.seed,
        pretty=args.pretty,
        timing=args.timing,
        verbosity=args.verbose,
        curvature=args.curvature,
        args=args,
    )


# =============================================================================
# Subcommands
# =============================================================================
def _mean_config(run: RunConfig) -> MeanConfig:
    a = run.args
    return MeanConfig(
        learning_rate=a.lr, tolerance=a.tol, max_iters=a.max_iters, subsample=a.mean_subsample, seed=run.seed,
    )


def _override_geometry(run: RunConfig, stored: Geometry) -> Optional[Geometry]:
    kind = getattr(run.args, "geometry", None)
    if kind is None or kind == stored.kind.value:
        return None
    if kind == GeometryKind.LORENTZ.value:
        return Geometry(kind, stored.ambient_dim, run.curvature)
    return Geometry(kind, stored.ambient_dim)


def _load_anchors(run: RunConfig, space):
    a = run.args
    if a.anchor_decomposition:
        return read_decomposition(a.anchor_decomposition)
    if a.anchors:
        return read_anchor_bank(a.anchors, a.anchor_labels, space, run.curvature)[1]
    return None


def cmd_mean(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        emb = read_embeddings(a.embeddings, run.curvature)
        g = _override_geometry(run, emb.geometry) or emb.geometry
        rows = g.project(emb.values) if g.kind is not GeometryKind.EUCLIDEAN else emb.values
        weights = read_weights(a.weights) if a.weights and a.weights != "uniform" else None
    with run.stage("mean"):
        result = intrinsic_mean(rows, weights, _mean_config(run), geometry=g)
    out = result.to_dict()
    out["geometry"] = g.to_dict()
    return out


def cmd_decompose(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        space = read_space(a.space) if a.space else None
        stored = read_embeddings(a.embeddings, run.curvature).geometry
        data = load_labeled_set(a.embeddings, a.labels, space, run.curvature, _override_geometry(run, stored))
        data = stratified_subsample(data, a.train_fraction, run.seed)
        anchors = _load_anchors(run, data.space)
    with run.stage("noise"):
        noise = build_noise(data, a.noise, anchors, a.temperature, a.logit_bias)
    cfg = _mean_config(run)
    with run.stage("decompose"):
        if a.method == "simple":
            dec = decompose_simple(data, cfg)
        elif a.method == "weighted":
            dec = decompose_weighted(data, noise, cfg)
        else:
            dec = decompose_sparse(data, noise, cfg)
    with run.stage("diagnostics"):
        fit = residuals(dec, data, noise)
        summary = {
            "geometry": dec.geometry.to_dict(),
            "method": a.method,
            "diagnostics": dec.diagnostics,
            "residual_total": fit.weighted_total,
            "tangent_objective": tangent_objective(dec, data, noise),
            "subspace_rank": subspace_rank(dec),
            "n_primitives": dec.space.n_primitives,
            "out": a.out,
        }
    with run.stage("write"):
        write_decomposition(a.out, dec)
    return summary


def cmd_classify(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        if a.decomposition:
            dec = read_decomposition(a.decomposition)
            space, geometry = dec.space, dec.geometry
        else:
            dec = None
            space = read_space(a.space)
            geometry, anchors = read_anchor_bank(a.anchors, a.anchor_labels, space, run.curvature)
        test = load_labeled_set(a.test_embeddings, a.test_labels, space, run.curvature, geometry)
        split = read_split(a.seen, space) if a.seen else None
    seen = split.seen_pairs if split else dec.seen
    open_world = a.world == "open" or (split is not None and split.open_world)
    if open_world:
        candidates = list(space.tuples())
    elif split is not None:
        candidates = split.candidates(space, test.labels)
    else:
        candidates = sorted(seen | test.seen())
    with run.stage("evaluate"):
        if dec is not None:
            bank = bank_from_decomposition(dec, candidates)
        else:
            wanted = set(candidates)
            bank = bank_from_anchors(geometry, {z: p for z, p in anchors.items() if z in wanted})
        report = czsl_evaluate(bank, test.rows, test.labels, seen, a.bias_grid)
    out = report.to_dict()
    if not a.curve:
        out.pop("curve")
    out["world"] = "open" if open_world else "closed"
    if a.baseline_auc is not None:
        out["auc_ratio"] = auc_ratio(report.auc, a.baseline_auc)
    return out


def cmd_robustness(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        dec = read_decomposition(a.decomposition)
        test = load_labeled_set(a.test_embeddings, a.test_labels, dec.space, run.curvature, dec.geometry)
        split = read_split(a.groups, dec.space) if a.groups else None
    names = [f.name for f in dec.space.factors]
    if a.factor is None:
        factor = len(names) - 1
    elif a.factor in names:
        factor = names.index(a.factor)
    else:
        raise ConfigError(f"unknown factor '{a.factor}'", {"factor": a.factor, "factors": names})
    if split is not None and split.groups:
        missing = [sid for sid in test.sample_ids if sid not in split.groups]
        if missing:
            raise ConfigError(f"{len(missing)} test sample(s) have no group", {"samples": missing[:10]})
        groups = [split.groups[sid] for sid in test.sample_ids]
        declared = sorted(set(split.groups.values()))
    else:
        groups = [dec.space.label(z) for z in test.labels]
        declared = [dec.space.label(z) for z in dec.space.tuples()]
    with run.stage("evaluate"):
        bank = object_bank(dec, factor)
        report = group_evaluate(bank, test.rows, [(z[factor],) for z in test.labels], groups, declared)
    out = report.to_dict()
    out["factor"] = names[factor]
    return out


def cmd_tune_temp(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        space = read_space(a.space) if a.space else read_labels(a.train_labels).space
        train = load_labeled_set(a.train_embeddings, a.train_labels, space, run.curvature)
        val = load_labeled_set(a.val_embeddings, a.val_labels, space, run.curvature, train.geometry)
        anchors = _load_anchors(run, space)
    with run.stage("tune"):
        result = tune_temperature(
            train, val, anchors,
            grid=a.grid,
            objective=a.objective,
            mode=a.noise,
            world=a.world,
            b=a.logit_bias,
            cfg=_mean_config(run),
            include_baseline=a.include_baseline,
        )
    out = result.to_dict()
    out["objective"] = a.objective
    out["noise"] = a.noise
    return out


def cmd_synth(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        try:
            with open(a.spec, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{a.spec} is not valid JSON: {e.msg}")
        if not isinstance(raw, dict):
            raise ConfigError(f"{a.spec} must hold a JSON object", {"found": type(raw).__name__})
        raw.setdefault("seed", run.seed)
        spec = SynthSpec.from_dict(raw)
    with run.stage("generate"):
        data, truth = generate(spec)
    with run.stage("write"):
        write_embeddings(a.out_embeddings, data.rows, data.geometry)
        write_labels(a.out_labels, data.sample_ids, data.labels, data.space)
        write_decomposition(a.out_truth, truth)
        if a.out_space:
            write_space(a.out_space, data.space)
    return {
        "spec": spec.to_dict(),
        "n_rows": len(data),
        "n_tuples": int(data.seen_ids().size),
        "geometry": data.geometry.to_dict(),
    }


def cmd_project(run: RunConfig) -> dict:
    a = run.args
    with run.stage("read"):
        dec = read_decomposition(a.decomposition)
    with run.stage("project"):
        labels, vectors = projection_source(dec, a.source)
        projection = pca_project(vectors, a.dim, labels)
    with run.stage("write"):
        atomic_write_bytes(a.out, get_csv_bytes(projection.to_frame()))
    out = projection.to_dict()
    out.update({"source": a.source, "out": a.out})
    return out


COMMANDS = {
    "mean": cmd_mean,
    "decompose": cmd_decompose,
    "classify": cmd_classify,
    "robustness": cmd_robustness,
    "tune-temp": cmd_tune_temp,
    "synth": cmd_synth,
    "project": cmd_project,
}


# =============================================================================
# Entry point
# =============================================================================
def _configure_logging(verbosity: int) -> None:
    level = {0: LOG_LEVEL, 1: "INFO"}.get(verbosity, "DEBUG")
    logging.basicConfig(
        level=getattr(logging, str(level), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        run = validate(parser, args)
    except SystemExit:
        return EXIT_USAGE
    _configure_logging(run.verbosity)

    try:
        result = COMMANDS[run.command](run)
    except GeodecompError as e:
        logger.error("%s: %s", e.code, e.message)
        sys.stdout.write(canonical_json(e.to_dict()))
        return EXIT_DOMAIN_ERROR
    except OSError as e:
        logger.error("I/O error: %s", e)
        sys.stdout.write(canonical_json({
            "code": "io_error", "message": str(e), "context": {"path": getattr(e, "filename", None)},
        }))
        return EXIT_DOMAIN_ERROR

    if run.timing:
        for stage, seconds in run.timings.items():
            sys.stderr.write(f"{stage:>12s} {seconds * 1000:10.1f} ms\n")
    sys.stdout.write(render_pretty(result) if run.pretty else canonical_json(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
