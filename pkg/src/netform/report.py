"""Estimate reports assembled from a sample, with CSV and JSON rendering."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .design import EstimationSample
from .estimation import fit_sample
from .exceptions import ValidationError
from .inference import (
    ENUMERATE,
    bonferroni_alpha,
    confidence_interval,
    conservative_variance,
    permutation_tests,
    write_histogram,
)

FORMAT_VERSION = 1


@dataclass
class CoefficientRow:
    name: str
    estimate: float
    se: float | None
    p_one_sided: float | None
    p_two_sided: float | None
    ci_low: float | None
    ci_high: float | None


@dataclass
class EstimateReport:
    outcome: str
    estimator: str
    new_hires: int
    offices: int
    edges: int
    coefficients: list[CoefficientRow]
    drop_log: list[dict]
    input_pairs: int
    permutation_mode: str
    n_draws: int
    group_size: int
    level: float
    seed: int
    config: dict = field(default_factory=dict)
    histogram_path: str | None = None
    notes: list[str] = field(default_factory=list)
    generated_at: str | None = None

    def coefficient(self, name: str) -> CoefficientRow:
        for row in self.coefficients:
            if row.name == name:
                return row
        raise KeyError(name)

    def bonferroni_cutoffs(self, alpha: float = 0.05, two_sided: bool = True) -> tuple[float, float]:
        """Lower/upper one-sided p cutoffs after dividing alpha by the number of
        slope tests in the report."""
        n = sum(1 for c in self.coefficients if c.name != "intercept" and c.p_one_sided is not None)
        a = bonferroni_alpha(alpha / 2 if two_sided else alpha, max(n, 1))
        return a, 1.0 - a

    def to_dict(self) -> dict:
        out = asdict(self)
        out["format_version"] = FORMAT_VERSION
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        raw = json.loads(text)
        raw.pop("format_version", None)
        raw["coefficients"] = [CoefficientRow(**c) for c in raw["coefficients"]]
        return cls(**raw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outcome", "new_hires", "offices", "edges", "coefficient", "estimate", "se",
                    "p_one_sided", "p_two_sided", "ci_low", "ci_high"])
        for c in self.coefficients:
            w.writerow([self.outcome, self.new_hires, self.offices, self.edges, c.name,
                        fmt5(c.estimate), fmt5(c.se), fmt5(c.p_one_sided), fmt5(c.p_two_sided),
                        fmt5(c.ci_low), fmt5(c.ci_high)])
        return buf.getvalue()


def fmt5(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.5f}"


def drop_log(sample: EstimationSample, net=None) -> list[dict]:
    def ids(idx):
        return net.ids(idx) if net is not None else list(idx)

    return [
        {"office": r.office_id, "reason": r.reason, "pairs": r.pairs,
         "rows": ids(r.rows), "cols": ids(r.cols)}
        for r in sample.drops
    ]


def analyze_sample(
    sample: EstimationSample,
    outcome: str = "tie_formed",
    kind: str | None = None,
    R=ENUMERATE,
    level: float = 0.95,
    threads: int = 1,
    histogram_path=None,
    histogram_coordinate: int = 1,
    net=None,
    config: dict | None = None,
) -> EstimateReport:
    """Fit one sample and summarize its permutation and variance inference."""
    fit = fit_sample(sample, kind, threads=threads)
    tests = permutation_tests(fit, sample.plan, R, threads=threads)
    notes = []
    try:
        v_hat = conservative_variance(fit)
    except ValidationError as exc:
        v_hat = None
        notes.append(str(exc))
    if v_hat is not None:
        lo, hi = confidence_interval(fit.estimate, v_hat, level)
    rows = []
    for c, name in enumerate(fit.names):
        t = tests[c]
        rows.append(CoefficientRow(
            name=name,
            estimate=float(fit.estimate[c]),
            se=None if v_hat is None else float(math.sqrt(v_hat[c])),
            p_one_sided=t.p_one_sided,
            p_two_sided=t.p_two_sided,
            ci_low=None if v_hat is None else float(lo[c]),
            ci_high=None if v_hat is None else float(hi[c]),
        ))
    hist = None
    if histogram_path is not None:
        if not 0 <= histogram_coordinate < len(tests):
            raise ValidationError("histogram coordinate out of range")
        write_histogram(histogram_path, tests[histogram_coordinate].draws)
        hist = str(histogram_path)
    return EstimateReport(
        outcome=outcome,
        estimator=fit.kind,
        new_hires=sample.m,
        offices=len(sample.offices),
        edges=sample.n_pairs,
        coefficients=rows,
        drop_log=drop_log(sample, net),
        input_pairs=sample.n_input_pairs,
        permutation_mode=tests[0].mode,
        n_draws=tests[0].n_draws,
        group_size=tests[0].group_size,
        level=level,
        seed=sample.plan.master_seed,
        config=dict(config or {}),
        histogram_path=hist,
        notes=notes,
    )
