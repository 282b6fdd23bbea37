"""Command-line entry point that turns CSV inputs into estimate reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Sequence


from .design import (
    DEFAULT_ENUMERATION_CAP,
    DesignPlan,
    median_threshold,
    plan_from_network,
    restrict_sample,
    sample_from_network,
    shift_outcomes,
)
from .exceptions import CapExceededError, NetformError, NumericalError, ValidationError
from .inference import ENUMERATE
from .network import TREATMENT_NAMES, NetStat, NodeRecord, TemporalNetwork, build_network
from .report import EstimateReport, analyze_sample
from .synthlab import (
    WorldConfig,
    export_world_csv,
    generate_world,
    placebo_run,
    run_oracle,
    sampled_oracle,
    world_to_json,
)

logger = logging.getLogger("netform")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CAP = 4

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


@dataclass
class RunConfig:
    nodes: str
    edges_t1: str
    edges_t2: str
    treatments: list[str] = field(default_factory=lambda: ["indirect_flag"])
    mode: str = "late"
    estimator: str | None = None
    permutations: str | int = ENUMERATE
    seed: int = 0
    thresholds: dict = field(default_factory=dict)
    level: float = 0.95
    out: str | None = None
    format: str = "csv"
    filter_i: str | None = None
    filter_j: str | None = None
    placebo: str | None = None
    threads: int = 1
    candidates: str = "all"
    null_shift: float | None = None
    histogram: str | None = None
    coordinate: int = 1
    cap: int = DEFAULT_ENUMERATION_CAP

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in ("ipw", "late"):
            raise ValidationError(f"--mode must be ipw or late, got {self.mode!r}")
        if self.estimator is not None and self.estimator.lower() not in ("ipw", "late"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        if isinstance(self.permutations, str) and self.permutations != ENUMERATE:
            try:
                self.permutations = int(self.permutations)
            except ValueError:
                raise ValidationError("--permutations must be an integer or 'enumerate'") from None
        if self.permutations != ENUMERATE and self.permutations < 1:
            raise ValidationError("Monte Carlo mode needs R >= 1 permutations")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("--level must lie in (0, 1)")
        if self.format not in ("csv", "json"):
            raise ValidationError("--format must be csv or json")
        if self.threads < 1:
            raise ValidationError("--threads must be at least 1")
        for name in self.treatments:
            if name not in TREATMENT_NAMES:
                raise ValidationError(f"unknown treatment {name!r}; expected one of {sorted(TREATMENT_NAMES)}")
        if not self.treatments:
            raise ValidationError("at least one treatment is required")

    def echo(self) -> dict:
        return asdict(self)


# --- ingestion -------------------------------------------------------------------

def _rows(path: str, required: Sequence[str]):
    """Yield ``(line_number, row)`` from a UTF-8 CSV with a header."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing header column(s) {missing}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            yield line, dict(zip(header, (c.strip() for c in row)))


def _covariate(value: str):
    if value == "" or value.upper() == "NA":
        return None
    try:
        return float(value)
    except ValueError:
        return value


def read_nodes(path: str) -> list[NodeRecord]:
    nodes = []
    seen = {}
    for line, row in _rows(path, ("node_id", "office", "new_hire")):
        flag = row["new_hire"].lower()
        if flag in _TRUE:
            new_hire = True
        elif flag in _FALSE:
            new_hire = False
        else:
            raise ValidationError(f"{path}:{line}: new_hire must be 0/1, got {row['new_hire']!r}")
        node_id = row["node_id"]
        if not node_id:
            raise ValidationError(f"{path}:{line}: empty node_id")
        if node_id in seen:
            raise ValidationError(f"{path}:{line}: duplicate node_id {node_id!r} (first on line {seen[node_id]})")
        seen[node_id] = line
        if new_hire and not row["office"]:
            raise ValidationError(f"{path}:{line}: new hire {node_id!r} has no office")
        covs = {k: _covariate(v) for k, v in row.items() if k not in ("node_id", "office", "new_hire")}
        nodes.append(NodeRecord(node_id, row["office"] or None, new_hire, covs))
    return nodes


def read_edges(path: str) -> list[tuple[str, str]]:
    edges = []
    for line, row in _rows(path, ("src", "dst")):
        if not row["src"] or not row["dst"]:
            raise ValidationError(f"{path}:{line}: empty endpoint")
        if row["src"] == row["dst"]:
            raise ValidationError(f"{path}:{line}: self-loop on {row['src']!r}")
        edges.append((row["src"], row["dst"]))
    return edges


def load_inputs(nodes: str, edges_t1: str, edges_t2: str, seed: int = 0,
                candidates: str = "all") -> tuple[TemporalNetwork, DesignPlan]:
    """Parse the roster and both snapshots and derive the design."""
    records = read_nodes(nodes)
    e1, e2 = read_edges(edges_t1), read_edges(edges_t2)
    net = build_network(records, e1, e2)
    plan = plan_from_network(net, seed, candidates)
    d1, d2 = net.duplicate_edges
    logger.info("loaded %d nodes, %d/%d edges (%d/%d duplicates collapsed), %d offices, %d new hires",
                net.n, net.n_edges(1), net.n_edges(2), d1, d2, len(plan.offices), sum(plan.sizes))
    return net, plan


# --- pipelines -------------------------------------------------------------------

def parse_filter(expr: str | None):
    """``"key=value,key2!=value2"`` predicate over node records.

    ``office`` refers to the office label; other keys are covariates.
    """
    if not expr:
        return None
    clauses = []
    for part in expr.split(","):
        part = part.strip()
        if "!=" in part:
            key, value = part.split("!=", 1)
            neg = True
        elif "=" in part:
            key, value = part.split("=", 1)
            neg = False
        else:
            raise ValidationError(f"filter clause {part!r} must look like key=value or key!=value")
        clauses.append((key.strip(), value.strip(), neg))

    def match(rec: NodeRecord) -> bool:
        for key, value, neg in clauses:
            actual = rec.office if key == "office" else rec.covariates.get(key)
            if isinstance(actual, float):
                try:
                    hit = actual == float(value)
                except ValueError:
                    hit = False
            else:
                hit = (actual or "") == value
            if hit == neg:
                return False
        return True

    return match


def parse_thresholds(text: str | None, treatments: Sequence[str]) -> dict:
    """Threshold per binarized treatment from ``median``, a number, or ``name=value`` pairs."""
    binarized = [t for t in treatments if TREATMENT_NAMES[t][1]]
    if not text:
        return {t: "median" for t in binarized}
    out = {}
    if "=" not in text:
        return {t: _threshold_value(text) for t in binarized}
    for part in text.split(","):
        name, value = part.split("=", 1)
        name = name.strip()
        if name not in binarized:
            raise ValidationError(f"threshold given for {name!r}, which is not a binarized treatment")
        out[name] = _threshold_value(value)
    for t in binarized:
        out.setdefault(t, "median")
    return out


def _threshold_value(text: str):
    text = text.strip()
    if text == "median":
        return "median"
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"threshold must be a number or 'median', got {text!r}") from None


def resolve_stats(net, plan, config: RunConfig) -> list[NetStat]:
    stats = []
    for name in config.treatments:
        kind, binarized = TREATMENT_NAMES[name]
        thr = None
        if binarized:
            thr = config.thresholds.get(name, "median")
            if thr == "median":
                thr = median_threshold(net, plan, kind)
        stats.append(NetStat.from_name(name, thr))
    return stats


def _sample(config: RunConfig):
    net, plan = load_inputs(config.nodes, config.edges_t1, config.edges_t2, config.seed, config.candidates)
    stats = resolve_stats(net, plan, config)
    sample = sample_from_network(net, plan, stats, config.mode)
    fi, fj = parse_filter(config.filter_i), parse_filter(config.filter_j)
    if fi or fj:
        sample = restrict_sample(
            sample,
            (lambda i: fi(net.nodes[i])) if fi else None,
            (lambda j: fj(net.nodes[j])) if fj else None,
        )
    return net, sample, stats


def _finish(report: EstimateReport, config: RunConfig, stats) -> EstimateReport:
    report.config = config.echo()
    report.config["resolved_thresholds"] = {s.name: s.binarize_threshold for s in stats if s.binarize_threshold is not None}
    report.generated_at = datetime.now(timezone.utc).isoformat()
    return report


def run_estimate(config: RunConfig) -> EstimateReport:
    """Build the sample from the inputs and produce the estimate report."""
    net, sample, stats = _sample(config)
    outcome = "tie_formed"
    if config.null_shift is not None:
        sample = shift_outcomes(sample, config.coordinate, config.null_shift)
        outcome = f"tie_formed - {config.null_shift!r} * {sample.names[config.coordinate]}"
    report = analyze_sample(
        sample, outcome=outcome, kind=config.estimator or config.mode, R=config.permutations,
        level=config.level, threads=config.threads, histogram_path=config.histogram,
        histogram_coordinate=config.coordinate, net=net,
    )
    return _finish(report, config, stats)


def run_placebo(config: RunConfig) -> EstimateReport:
    if not config.placebo:
        raise ValidationError("--placebo <covariate> is required")
    net, sample, stats = _sample(config)
    hires = [i for o in sample.offices for i in o.rows]
    if not any(config.placebo in net.nodes[i].covariates for i in hires):
        raise ValidationError(f"covariate {config.placebo!r} is not present for any new hire")
    values = {i: net.nodes[i].covariates.get(config.placebo) for i in hires}
    bad = [net.nodes[i].id for i, v in values.items() if v is not None and not isinstance(v, float)]
    if bad:
        raise ValidationError(f"covariate {config.placebo!r} is not numeric for hires {bad[:5]}")
    report = placebo_run(sample, config.placebo, values, kind=config.estimator or config.mode,
                         R=config.permutations, level=config.level, threads=config.threads, net=net,
                         histogram_path=config.histogram)
    return _finish(report, config, stats)


def run_simulate(args) -> dict:
    """Generate a world, write it to disk and run the oracle on it."""
    config = WorldConfig(
        office_sizes=tuple(_ints(args.offices)),
        candidates_per_office=args.candidates_per_office,
        teams_per_office=args.teams,
        seniors_per_team=args.seniors_per_team,
        edge_prob=args.edge_prob,
        delta=tuple(_floats(args.delta)),
        homophily=args.homophily,
        treatments=tuple(_names(args.treatments)),
        sorted_teams=args.sorted_teams,
        balanced_teams=args.balanced_teams,
        mode=args.mode,
    )
    world = generate_world(config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "world.json"), "w", newline="\n") as fh:
        fh.write(world_to_json(world))
    export_world_csv(world, args.out)
    kind = args.estimator or args.mode
    if world.plan.group_size <= args.cap:
        oracle = run_oracle(world, kind, cap=args.cap, method="tables")
        mode = "enumerated"
    elif args.monte_carlo:
        oracle = sampled_oracle(world, kind, args.monte_carlo)
        mode = "monte_carlo"
    else:
        raise CapExceededError(
            f"group has {world.plan.group_size} elements, above the cap {args.cap}; "
            "pass --monte-carlo R to sample instead"
        )
    summary = oracle.summary()
    summary["oracle_mode"] = mode
    summary["n_evaluated"] = len(oracle.estimates)
    summary["seed"] = args.seed
    path = os.path.join(args.out, f"oracle.{args.format}")
    with open(path, "w", newline="") as fh:
        if args.format == "json":
            fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coefficient", "realized", "mean_estimate", "estimand", "variance", "mean_v_hat",
                        "berry_esseen_estimator", "group_size", "oracle_mode"])
            for c, name in enumerate(oracle.names):
                w.writerow([name, repr(float(oracle.realized[c])), repr(float(oracle.mean_estimate[c])),
                            repr(float(oracle.estimand[c])), repr(float(oracle.variance[c])),
                            "NA" if oracle.mean_v_hat is None else repr(float(oracle.mean_v_hat[c])),
                            "NA" if oracle.be_estimator is None else repr(float(oracle.be_estimator[c])),
                            oracle.group_size, mode])
    return summary


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected a comma list of integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected a comma list of numbers, got {text!r}") from None


def _names(text):
    return [x.strip() for x in text.split(",") if x.strip()]


# --- argument parsing ------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges-t1", required=True)
    p.add_argument("--edges-t2", required=True)
    p.add_argument("--treatments", default="indirect_flag",
                   help="comma list of " + "|".join(sorted(TREATMENT_NAMES)))
    p.add_argument("--mode", default="late", choices=["ipw", "late"])
    p.add_argument("--estimator", choices=["ipw", "late"], default=None,
                   help="estimator kind (defaults to --mode)")
    p.add_argument("--permutations", default=ENUMERATE, help="integer R or 'enumerate'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--threshold", default=None,
                   help="'median', a number, or name=value pairs for binarized treatments")
    p.add_argument("--candidates", choices=["all", "office"], default="all")
    p.add_argument("--filter-i", default=None, help="key=value[,key!=value] predicate on new hires")
    p.add_argument("--filter-j", default=None, help="key=value[,key!=value] predicate on candidate ties")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--histogram", default=None, help="write permutation draws to this CSV")
    p.add_argument("--coordinate", type=int, default=1, help="coefficient index for histogram and shifts")
    p.add_argument("--null-shift", type=float, default=None,
                   help="test a constant effect of this size instead of zero")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netform", description="Design-based network formation estimates.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("estimate", "effect estimates with permutation inference"),
                        ("placebo", "placebo regression of a hire covariate"),
                        ("permtest", "export the permutation distribution histogram")):
        p = sub.add_parser(name, help=help_)
        _add_data_args(p)
        if name == "placebo":
            p.add_argument("--placebo", required=True, help="new-hire covariate used as the outcome")
    p = sub.add_parser("simulate", help="generate a synthetic world and run the oracle")
    p.add_argument("--offices", default="3,3", help="comma list of new hires per office")
    p.add_argument("--candidates-per-office", type=int, default=6)
    p.add_argument("--teams", type=int, default=2)
    p.add_argument("--seniors-per-team", type=int, default=2)
    p.add_argument("--edge-prob", type=float, default=0.3)
    p.add_argument("--delta", default="0,0", help="intercept then one coefficient per treatment")
    p.add_argument("--homophily", type=float, default=0.0)
    p.add_argument("--treatments", default="indirect_flag")
    p.add_argument("--sorted-teams", action="store_true")
    p.add_argument("--balanced-teams", action="store_true")
    p.add_argument("--mode", default="late", choices=["ipw", "late"])
    p.add_argument("--estimator", choices=["ipw", "late"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=DEFAULT_ENUMERATION_CAP)
    p.add_argument("--monte-carlo", type=int, default=None, metavar="R",
                   help="sample R shuffles when the group exceeds the cap")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    return parser


def config_from_args(args) -> RunConfig:
    treatments = _names(args.treatments)
    return RunConfig(
        nodes=args.nodes,
        edges_t1=args.edges_t1,
        edges_t2=args.edges_t2,
        treatments=treatments,
        mode=args.mode,
        estimator=args.estimator,
        permutations=args.permutations,
        seed=args.seed,
        thresholds=parse_thresholds(args.threshold, treatments) if all(t in TREATMENT_NAMES for t in treatments) else {},
        level=args.level,
        out=args.out,
        format=args.format,
        filter_i=args.filter_i,
        filter_j=args.filter_j,
        placebo=getattr(args, "placebo", None),
        threads=args.threads,
        candidates=args.candidates,
        null_shift=args.null_shift,
        histogram=args.histogram,
        coordinate=args.coordinate,
    )


def render(report: EstimateReport, fmt: str) -> str:
    return report.to_json() + "\n" if fmt == "json" else report.to_csv()


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            summary = run_simulate(args)
            logger.info("oracle: %s", summary)
            return EXIT_OK
        config = config_from_args(args)
        if args.command == "permtest":
            if not config.histogram:
                config.histogram = config.out or "histogram.csv"
            report = run_estimate(config)
            logger.info("wrote %d draws to %s", report.n_draws, config.histogram)
            return EXIT_OK
        report = run_placebo(config) if args.command == "placebo" else run_estimate(config)
        _emit(render(report, config.format), config.out)
        return EXIT_OK
    except CapExceededError as exc:
        print(f"netform: cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except NumericalError as exc:
        print(f"netform: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"netform: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NetformError as exc:
        print(f"netform: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
