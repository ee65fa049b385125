"""RMSE metrics over Monte-Carlo output and fusion-mode comparisons.

Self-localization RMSE is the root mean squared planar position error over
trials and connected vehicles at one time step. Target RMSE is the same over
targets inside at least one vehicle's perception area, with errors expressed
in the reference vehicle's body frame (so a pose error degrades the relative
target accuracy it causes). Only planar (x, y) errors enter either metric:
the simulation's height observability is artificial.

All functions consume the tidy rows produced by the simulator (or read back
from its CSV), keyed by an estimate source: ``fused``, ``local:<vehicle>`` or
``gnss:<vehicle>``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricReport",
    "ModeComparison",
    "load_rows",
    "rmse_self",
    "rmse_targets",
    "build_report",
    "single_vehicle_reports",
    "compare_modes",
    "write_metrics_csv",
    "write_comparison_csv",
    "plot_rmse_svg",
]

_NUM_INT = ("trial", "tick", "visible")
_NUM_FLOAT = ("time", "true_x", "true_y", "est_x", "est_y", "err_body_x", "err_body_y")


def load_rows(path) -> list:
    """Read the simulator's trial CSV back into row dicts."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            r = dict(raw)
            for k in _NUM_INT:
                r[k] = int(r[k]) if r[k] != "" else 0
            for k in _NUM_FLOAT:
                r[k] = float(r[k]) if r[k] != "" else None
            rows.append(r)
    return rows


def _self_match(row_source: str, query: str) -> bool:
    """Does a vehicle row's source belong to the queried source family?

    The families: "fused"; "gnss" (any receiver); "local" (each vehicle about
    itself; local rows only ever carry the vehicle's own pose); or an exact
    "local:<vid>" / "gnss:<vid>" string.
    """
    if query == "gnss":
        return row_source.startswith("gnss:")
    if query == "local":
        return row_source.startswith("local:")
    return row_source == query


def _self_errors(rows, tick: int, source: str) -> list:
    """Squared planar self-position errors at one tick for one source family."""
    return [(r["est_x"] - r["true_x"]) ** 2 + (r["est_y"] - r["true_y"]) ** 2
            for r in rows
            if r["tick"] == tick and r["kind"] == "vehicle"
            and _self_match(r["source"], source)]


def _target_errors(rows, tick: int, source: str) -> list:
    """Squared body-frame errors of visible targets at one tick."""
    out = []
    for r in rows:
        if (r["tick"] == tick and r["kind"] == "target" and r["source"] == source
                and r["visible"] == 1 and r["err_body_x"] is not None):
            out.append(r["err_body_x"] ** 2 + r["err_body_y"] ** 2)
    return out


def rmse_self(rows, tick: int, source: str = "fused") -> float:
    """Self-localization RMSE at one tick: sqrt(mean over trials x vehicles).

    ``source`` is "fused", "gnss", "local" (each vehicle about itself) or a
    specific "local:<vid>" / "gnss:<vid>".
    """
    sq = _self_errors(rows, tick, source)
    if not sq:
        raise ValueError(f"no data for source {source!r} at tick {tick}")
    return math.sqrt(sum(sq) / len(sq))


def rmse_targets(rows, tick: int, source: str = "fused") -> float:
    """Target RMSE at one tick over targets inside some perception area."""
    sq = _target_errors(rows, tick, source)
    if not sq:
        raise ValueError(f"no observed targets for source {source!r} at tick {tick}")
    return math.sqrt(sum(sq) / len(sq))


@dataclass
class MetricReport:
    label: str
    scenario: str
    mode: str
    n_trials: int
    ticks: np.ndarray
    times: np.ndarray
    rmse_self: np.ndarray       # per tick; NaN where no data
    rmse_targets: np.ndarray    # per tick; NaN where no targets visible
    n_targets: np.ndarray
    failed_trials: int = 0
    agg_self: float = 0.0
    agg_self_se: float = 0.0
    agg_targets: float = float("nan")
    agg_targets_se: float = float("nan")

    def summary(self) -> dict:
        return {
            "label": self.label,
            "scenario": self.scenario,
            "mode": self.mode,
            "n_trials": self.n_trials,
            "failed_trials": self.failed_trials,
            "rmse_self": self.agg_self,
            "rmse_self_se": self.agg_self_se,
            "rmse_targets": self.agg_targets,
            "rmse_targets_se": self.agg_targets_se,
        }


def _aggregate(per_trial_sq: dict) -> tuple:
    """(rmse, standard error of rmse) from per-trial mean squared errors."""
    vals = [np.mean(v) for v in per_trial_sq.values() if v]
    if not vals:
        return float("nan"), float("nan")
    mse = float(np.mean(vals))
    rmse = math.sqrt(mse)
    if len(vals) < 2 or rmse == 0.0:
        return rmse, 0.0
    se_mse = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
    return rmse, se_mse / (2.0 * rmse)  # delta method through sqrt


def build_report(rows, label: str, source: str = "fused", scenario: str = "",
                 mode: str = "") -> MetricReport:
    """Per-tick metric curves plus Monte-Carlo aggregates for one source."""
    ticks = sorted({r["tick"] for r in rows if r["source"] != "failed"})
    times, rs, rt, nt = [], [], [], []
    self_by_trial: dict = {}
    tgt_by_trial: dict = {}
    for tk in ticks:
        t_rows = [r for r in rows if r["tick"] == tk]
        times.append(next(r["time"] for r in t_rows))
        sq_slf = _self_errors(t_rows, tk, source)
        sq_tgt = _target_errors(t_rows, tk, source)
        rs.append(math.sqrt(np.mean(sq_slf)) if sq_slf else float("nan"))
        rt.append(math.sqrt(np.mean(sq_tgt)) if sq_tgt else float("nan"))
        nt.append(len(sq_tgt))
    for r in rows:
        if r["source"] == "failed":
            continue
        if r["kind"] == "vehicle" and _self_match(r["source"], source):
            self_by_trial.setdefault(r["trial"], []).append(
                (r["est_x"] - r["true_x"]) ** 2 + (r["est_y"] - r["true_y"]) ** 2)
        elif (r["kind"] == "target" and r["source"] == source and r["visible"] == 1
                and r["err_body_x"] is not None):
            tgt_by_trial.setdefault(r["trial"], []).append(
                r["err_body_x"] ** 2 + r["err_body_y"] ** 2)
    failed = len({r["trial"] for r in rows if r["source"] == "failed"})
    agg_s, se_s = _aggregate(self_by_trial)
    agg_t, se_t = _aggregate(tgt_by_trial)
    n_trials = len({r["trial"] for r in rows})
    return MetricReport(
        label=label, scenario=scenario, mode=mode, n_trials=n_trials,
        ticks=np.asarray(ticks), times=np.asarray(times),
        rmse_self=np.asarray(rs), rmse_targets=np.asarray(rt), n_targets=np.asarray(nt),
        failed_trials=failed,
        agg_self=agg_s, agg_self_se=se_s, agg_targets=agg_t, agg_targets_se=se_t,
    )


def single_vehicle_reports(rows, scenario: str = "", mode: str = "") -> dict:
    """One report per connected vehicle's own local estimate."""
    vids = sorted({r["source"][6:] for r in rows if r["source"].startswith("local:")})
    return {vid: build_report(rows, f"local:{vid}", source=f"local:{vid}",
                              scenario=scenario, mode=mode)
            for vid in vids}


@dataclass
class ModeComparison:
    reports: dict
    baseline_label: str
    proposed_label: str
    improvement_self: float
    improvement_targets: float
    passed: bool
    checks: list = field(default_factory=list)

    def summary_lines(self) -> list:
        lines = []
        for label, rep in self.reports.items():
            lines.append(
                f"{label:>16}: self RMSE {rep.agg_self:.4f} m"
                + ("" if math.isnan(rep.agg_targets)
                   else f", target RMSE {rep.agg_targets:.4f} m")
                + (f", {rep.failed_trials} failed trials" if rep.failed_trials else "")
            )
        lines.append(
            f"improvement ({self.proposed_label} vs {self.baseline_label}): "
            f"self {100 * self.improvement_self:+.1f}%, "
            f"targets {100 * self.improvement_targets:+.1f}%"
        )
        for name, ok, detail in self.checks:
            lines.append(f"check {name}: {'pass' if ok else 'FAIL'} ({detail})")
        return lines


def _improvement(single: float, coop: float) -> float:
    if math.isnan(single) or math.isnan(coop) or single == 0.0:
        return float("nan")
    return (single - coop) / single


def compare_modes(reports: dict, baseline: str, proposed: str,
                  thresholds: dict | None = None) -> ModeComparison:
    """Side-by-side aggregate comparison with threshold checks.

    Reports must come from the same scenario and seed set. ``improvement`` is
    (single - coop) / single; thresholds may require minimum improvements.
    """
    metas = {(r.scenario, r.n_trials) for r in reports.values()}
    if len(metas) > 1:
        raise ValueError(f"reports mix scenarios/trial counts: {sorted(metas)}")
    base, prop = reports[baseline], reports[proposed]
    imp_s = _improvement(base.agg_self, prop.agg_self)
    imp_t = _improvement(base.agg_targets, prop.agg_targets)
    checks = []
    passed = True
    th = thresholds or {}
    if "min_improvement_targets" in th:
        need = float(th["min_improvement_targets"])
        ok = not math.isnan(imp_t) and imp_t >= need
        checks.append(("min_improvement_targets", ok, f"{imp_t:.3f} >= {need}"))
        passed &= ok
    if "min_improvement_self" in th:
        need = float(th["min_improvement_self"])
        ok = not math.isnan(imp_s) and imp_s >= need
        checks.append(("min_improvement_self", ok, f"{imp_s:.3f} >= {need}"))
        passed &= ok
    if "max_target_rmse" in th:
        need = float(th["max_target_rmse"])
        ok = not math.isnan(prop.agg_targets) and prop.agg_targets <= need
        checks.append(("max_target_rmse", ok, f"{prop.agg_targets:.3f} <= {need}"))
        passed &= ok
    if not th:
        ok = not (math.isnan(imp_t) and math.isnan(imp_s))
        worse = (not math.isnan(imp_t) and imp_t < 0.0) or \
                (math.isnan(imp_t) and not math.isnan(imp_s) and imp_s < 0.0)
        checks.append(("coop_not_worse", ok and not worse,
                       f"self {imp_s:.3f}, targets {imp_t:.3f}"))
        passed = ok and not worse
    return ModeComparison(reports=reports, baseline_label=baseline, proposed_label=proposed,
                          improvement_self=imp_s, improvement_targets=imp_t,
                          passed=passed, checks=checks)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_metrics_csv(reports, path) -> None:
    """Per-tick metric curves, one row per (tick, label)."""
    if isinstance(reports, MetricReport):
        reports = [reports]
    with open(path, "w") as fh:
        fh.write("t,mode,rmse_self,rmse_targets,n_targets\n")
        for rep in reports:
            for i in range(len(rep.ticks)):
                fh.write(f"{_fmt(rep.times[i])},{rep.label},{_fmt(rep.rmse_self[i])},"
                         f"{_fmt(rep.rmse_targets[i])},{int(rep.n_targets[i])}\n")


def write_comparison_csv(cmp: ModeComparison, path) -> None:
    with open(path, "w") as fh:
        fh.write("label,rmse_self,rmse_self_se,rmse_targets,rmse_targets_se,failed_trials\n")
        for label, rep in cmp.reports.items():
            fh.write(f"{label},{_fmt(rep.agg_self)},{_fmt(rep.agg_self_se)},"
                     f"{_fmt(rep.agg_targets)},{_fmt(rep.agg_targets_se)},{rep.failed_trials}\n")
        fh.write(f"improvement_self,{_fmt(cmp.improvement_self)},,,,\n")
        fh.write(f"improvement_targets,{_fmt(cmp.improvement_targets)},,,,\n")


def plot_rmse_svg(reports, path, which: str = "self") -> None:
    """RMSE-vs-time line plot per report, written as SVG."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for rep in reports:
        y = rep.rmse_self if which == "self" else rep.rmse_targets
        ax.plot(rep.times, y, label=rep.label)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(f"{which} RMSE [m]")
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
