"""Command-line entry point: ``vprgraph <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .evaluation import (
    GroundTruthMatrix,
    Mode,
    ScenarioParams,
    SyntheticScenario,
    average_precision,
    generate_scenario,
    precision_recall_curve,
    run_experiment,
)
from .graph import optimize_patched
from .pipeline import (
    intra_from_descriptors,
    intra_from_poses,
    pairwise_similarities,
    standardize,
)
from .simcore import (
    FactorWeights,
    IntraKind,
    IntraSetSimilarities,
    InvalidParams,
    ProblemSpec,
    SequenceConfig,
    SimGraphError,
)

log = logging.getLogger("vprgraph")

SCENARIO_FILES = {
    "db_descriptors": "db_descriptors.csv",
    "q_descriptors": "q_descriptors.csv",
    "db_poses": "db_poses.csv",
    "q_poses": "q_poses.csv",
    "ground_truth": "ground_truth.csv",
}

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected library error
  2  invalid parameters or conflicting flags
  3  empty matrix or value outside [0, 1]
  4  size / dimension mismatch
  5  problem too large (patch first)
  6  ground truth has no positives
  7  numerical failure in the solver
  8  file I/O error
"""


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_spec(args) -> ProblemSpec:
    return ProblemSpec.load(args.spec) if args.spec else ProblemSpec()


# --- generate -----------------------------------------------------------------

def cmd_generate(args) -> int:
    params = ScenarioParams(
        places=args.places, loop_segments=args.loops, stop_segments=args.stops,
        dim=args.dim, condition_shift=args.condition_shift, noise=args.noise,
        radius=args.radius,
    )
    sc = generate_scenario(params, args.seed)
    out = _out_dir(args.out)
    fileio.write_matrix(out / SCENARIO_FILES["db_descriptors"], sc.db_descriptors.vectors)
    fileio.write_matrix(out / SCENARIO_FILES["q_descriptors"], sc.q_descriptors.vectors)
    fileio.write_matrix(out / SCENARIO_FILES["db_poses"], sc.db_poses.positions)
    fileio.write_matrix(out / SCENARIO_FILES["q_poses"], sc.q_poses.positions)
    fileio.write_matrix(out / SCENARIO_FILES["ground_truth"], sc.ground_truth.values)
    print(f"wrote {sc.db_poses.count} database / {sc.q_poses.count} query images to {out}")
    return 0


def load_scenario(directory: str | Path, radius: float) -> SyntheticScenario:
    d = Path(directory)
    return SyntheticScenario(
        params=ScenarioParams(radius=radius),
        seed=-1,
        db_poses=fileio.read_poses(d / SCENARIO_FILES["db_poses"]),
        q_poses=fileio.read_poses(d / SCENARIO_FILES["q_poses"]),
        db_descriptors=fileio.read_descriptors(d / SCENARIO_FILES["db_descriptors"]),
        q_descriptors=fileio.read_descriptors(d / SCENARIO_FILES["q_descriptors"]),
        ground_truth=GroundTruthMatrix(fileio.read_matrix(d / SCENARIO_FILES["ground_truth"])),
    )


# --- similarities ---------------------------------------------------------------

def cmd_similarities(args) -> int:
    db = fileio.read_descriptors(args.db)
    q = fileio.read_descriptors(args.q)
    if args.standardize:
        db, q = standardize(db, q)
    S = pairwise_similarities(db, q)
    out = _out_dir(args.out)
    fileio.write_matrix(out / "similarities.csv", S.values)
    print(f"wrote {S.rows}x{S.cols} similarity matrix to {out / 'similarities.csv'}")
    return 0


# --- optimize ---------------------------------------------------------------------

def _intra(matrix, poses, desc, radius, name) -> IntraSetSimilarities | None:
    given = [p for p in (matrix, poses, desc) if p]
    if len(given) > 1:
        raise InvalidParams(f"conflicting {name} sources: give only one of matrix/poses/desc")
    if matrix:
        m = fileio.read_matrix(matrix)
        kind = IntraKind.FROM_POSES if np.all((m == 0) | (m == 1)) else IntraKind.FROM_DESCRIPTORS
        return IntraSetSimilarities(m, kind)
    if poses:
        return intra_from_poses(fileio.read_poses(poses), radius)
    if desc:
        return intra_from_descriptors(fileio.read_descriptors(desc))
    return None


def cmd_optimize(args) -> int:
    S_hat = fileio.read_similarity(args.similarities)
    spec = _load_spec(args)
    intra_db = _intra(args.intra_db_matrix, args.intra_db_poses, args.intra_db_desc, args.radius,
                      "intra-db")
    intra_q = _intra(args.intra_q_matrix, None, args.intra_q_desc, args.radius, "intra-q")
    if not args.spec and intra_db is not None and intra_db.kind is IntraKind.FROM_DESCRIPTORS:
        spec = replace(spec, weights=FactorWeights.for_sources(db_from_poses=False))
    if not args.seq:
        spec = replace(spec, seq=None)
    elif spec.seq is None:
        spec = replace(spec, seq=SequenceConfig())

    solves = []
    t0 = time.perf_counter()
    S = optimize_patched(S_hat, intra_db, intra_q, spec, workers=args.workers, reports=solves)
    elapsed = time.perf_counter() - t0

    out = _out_dir(args.out)
    fileio.write_matrix(out / "optimized.csv", S.values)
    report = {
        "spec": spec.to_dict(),
        "shape": list(S.shape),
        "seconds": elapsed,
        "patches": [
            {"rows": list(b[0]), "cols": list(b[1]), "factor_counts": {k.value: v for k, v in c.items()},
             **r.to_dict()}
            for b, r, c in solves
        ],
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if args.heatmaps:
        fileio.write_pgm(out / "initial.pgm", S_hat.values)
        fileio.write_pgm(out / "optimized.pgm", S.values)
    iters = sum(r.iterations for _, r, _ in solves)
    print(f"optimized {S.rows}x{S.cols} in {len(solves)} patch(es), {iters} iterations, {elapsed:.2f}s")
    return 0


# --- eval ---------------------------------------------------------------------

def write_pr_curve(path: Path, recall, precision) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in zip(recall, precision):
            w.writerow([fileio.format_float(r), fileio.format_float(p)])


def cmd_eval(args) -> int:
    S = fileio.read_similarity(args.similarities)
    gt = GroundTruthMatrix(fileio.read_matrix(args.ground_truth))
    ap = average_precision(S, gt)
    print(f"AP {ap:.6f}")
    if args.out:
        out = _out_dir(args.out)
        write_pr_curve(out / "pr_curve.csv", *precision_recall_curve(S, gt))
        with open(out / "eval.json", "w") as fh:
            json.dump({"average_precision": ap}, fh, indent=2)
            fh.write("\n")
    return 0


# --- compare ----------------------------------------------------------------------

def cmd_compare(args) -> int:
    sc = load_scenario(args.scenario, args.radius)
    spec = _load_spec(args)
    rows = []
    for standardized in (False, True):
        for mode in Mode:
            rep = run_experiment(sc, spec, mode, standardized=standardized, radius=args.radius)
            rows.append(rep)
            print(f"{rep.label:<18} AP {rep.ap:.4f}")
    out = _out_dir(args.out)
    with open(out / "compare.json", "w") as fh:
        json.dump({"spec": spec.to_dict(), "results": [r.to_dict() for r in rows]}, fh, indent=2)
        fh.write("\n")
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["preprocessing"] + [m.value for m in Mode])
        for standardized in (False, True):
            aps = {r.mode: r.ap for r in rows if r.standardized == standardized}
            w.writerow(["standardized" if standardized else "raw"]
                       + [fileio.format_float(aps[m.value]) for m in Mode])
    return 0


# --- heatmap ----------------------------------------------------------------------

def cmd_heatmap(args) -> int:
    S = fileio.read_similarity(args.matrix)
    fileio.write_pgm(args.output, S.values)
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vprgraph",
        description="Refine place-recognition similarity matrices with a factor graph.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario")
    g.add_argument("--places", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--loops", type=int, default=1)
    g.add_argument("--stops", type=int, default=2)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--noise", type=float, default=ScenarioParams.noise)
    g.add_argument("--condition-shift", type=float, default=0.0)
    g.add_argument("--radius", type=float, default=ScenarioParams.radius,
                   help="ground-truth radius in meters (places are 1 m apart)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("similarities", help="pairwise similarities from descriptor CSVs")
    s.add_argument("--db", required=True)
    s.add_argument("--q", required=True)
    s.add_argument("--standardize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_similarities)

    o = sub.add_parser("optimize", help="optimize a similarity matrix")
    o.add_argument("similarities")
    o.add_argument("--spec", help="ProblemSpec JSON; absent keys take defaults")
    o.add_argument("--intra-db-matrix")
    o.add_argument("--intra-db-poses")
    o.add_argument("--intra-db-desc")
    o.add_argument("--intra-q-matrix")
    o.add_argument("--intra-q-desc")
    o.add_argument("--seq", action="store_true", help="add sequence factors")
    o.add_argument("--radius", type=float, default=10.0, help="pose match radius in meters")
    o.add_argument("--heatmaps", action="store_true", help="also write PGM heatmaps")
    o.add_argument("--workers", type=int, default=1)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("eval", help="average precision against ground truth")
    e.add_argument("similarities")
    e.add_argument("ground_truth")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="run every mode on a generated scenario")
    c.add_argument("scenario")
    c.add_argument("--spec")
    c.add_argument("--radius", type=float, default=ScenarioParams.radius)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    h = sub.add_parser("heatmap", help="render a matrix CSV as a PGM image")
    h.add_argument("matrix")
    h.add_argument("output")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SimGraphError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 8


if __name__ == "__main__":
    sys.exit(main())
