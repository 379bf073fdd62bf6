import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from mixsur.inference.estimates import (
    CrossTab,
    IntervalEstimate,
    covariance_table,
    intervals_frame,
)
from mixsur.inference.selection import SearchGrid
from mixsur.model.gradcheck import GradcheckReport
from mixsur.objects import FitResult, ParameterLayout

BIC_CONVENTION = "BIC = 2 loglik - npar ln(I); larger is better"
SE_CONVENTION = "standard errors are square roots of the diagonal of (-H)^-1 at the estimate"


def _plain(value: Any) -> Any:
    """A JSON-friendly copy: numpy scalars become Python numbers, NaN and inf become None."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def format_cell(value: Any) -> str:
    """Floats are written with repr, so text and JSON carry identical digits."""
    value = _plain(value)
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Report:
    """
    Tables and values produced by a command, written as `report.txt` (rich tables)
    and `report.json` (every number at full precision).
    """

    command: str
    values: dict[str, Any] = field(default_factory=dict)
    tables: dict[str, tuple[str, pd.DataFrame]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add_value(self, key: str, value: Any) -> None:
        self.values[key] = value

    def add_table(self, key: str, frame: pd.DataFrame, title: str | None = None) -> None:
        self.tables[key] = (title or key, frame)

    def add_note(self, note: str) -> None:
        self.notes.append(note)

    def to_json(self) -> dict:
        return _plain(
            {
                "command": self.command,
                "values": self.values,
                "tables": {
                    key: {
                        "title": title,
                        "columns": [str(c) for c in frame.columns],
                        "index": [str(i) for i in frame.index],
                        "data": frame.to_numpy(dtype=object).tolist(),
                    }
                    for key, (title, frame) in self.tables.items()
                },
                "notes": self.notes,
            }
        )

    def render(self, console: Console) -> None:
        console.print(f"[bold]mixsur {self.command}[/bold]")
        for key, value in self.values.items():
            if isinstance(value, (dict, list)):
                continue
            console.print(escape(f"{key}: {format_cell(value)}"))
        for title, frame in self.tables.values():
            table = Table(title=escape(title))
            table.add_column("")
            for column in frame.columns:
                table.add_column(escape(str(column)), justify="right", overflow="fold")
            for index, row in frame.iterrows():
                table.add_row(
                    escape(str(index)), *[escape(format_cell(v)) for v in row.tolist()]
                )
            console.print(table)
        for note in self.notes:
            console.print(f"[italic]{escape(note)}[/italic]")

    def to_text(self) -> str:
        console = Console(record=True, width=160, file=io.StringIO())
        self.render(console)
        return console.export_text()

    def write(self, out_dir: str | Path, formats: list[str] | None = None) -> list[Path]:
        formats = formats or ["text", "json"]
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if "json" in formats:
            path = out_dir / "report.json"
            with open(path, "w") as f:
                json.dump(self.to_json(), f, indent=2)
            written.append(path)
        if "text" in formats:
            path = out_dir / "report.txt"
            with open(path, "w") as f:
                f.write(self.to_text())
            written.append(path)
        return written


def weights_frame(fit: FitResult) -> pd.DataFrame:
    return pd.DataFrame(
        {"weight": fit.theta.weights},
        index=[f"component {k + 1}" for k in range(fit.theta.n_components)],
    )


def intercepts_frame(fit: FitResult, se: pd.Series | None = None) -> pd.DataFrame:
    spec = fit.spec
    names = [spec.response_label(d) for d in range(spec.n_equations)]
    frame = pd.DataFrame(
        fit.theta.intercepts,
        index=[f"lambda{k + 1}" for k in range(fit.theta.n_components)],
        columns=names,
    )
    if se is not None:
        layout = ParameterLayout(spec)
        rows = []
        for k in range(fit.theta.n_components):
            rows.append(se.to_numpy()[layout.intercept(k)])
        se_frame = pd.DataFrame(
            rows,
            index=[f"se(lambda{k + 1})" for k in range(fit.theta.n_components)],
            columns=names,
        )
        frame = pd.concat([frame, se_frame])
    return frame


def fit_report(
    fit: FitResult,
    intervals: list[IntervalEstimate] | None = None,
    se: pd.Series | None = None,
    crosstab: CrossTab | None = None,
    level: float = 0.95,
) -> Report:
    """Model summary, weights, intercepts, covariances and coefficient intervals of a fit."""
    spec = fit.spec
    report = Report(command="fit")
    report.add_value("n_obs", fit.dataset.n_obs)
    report.add_value("n_components", spec.n_components)
    report.add_value("n_regressors", spec.n_regressors)
    report.add_value("loglik", fit.loglik)
    report.add_value("npar", fit.npar)
    report.add_value("bic", fit.bic)
    report.add_value("status", fit.status.value)
    report.add_value("n_iter", fit.n_iter)
    report.add_value("start_index", fit.start_index)
    report.add_value("level", level)
    report.add_value("fit", fit.to_json())

    report.add_table("weights", weights_frame(fit), "Mixture weights")
    report.add_table("intercepts", intercepts_frame(fit, se), "Component intercepts")
    names = [spec.response_label(d) for d in range(spec.n_equations)]
    for k in range(spec.n_components):
        report.add_table(
            f"sigma{k + 1}",
            covariance_table(fit.theta, k, names),
            f"Sigma {k + 1} (correlations below the diagonal)",
        )
    if intervals is not None:
        report.add_table(
            "coefficients",
            intervals_frame(intervals),
            f"Regression coefficients ({level:.0%} asymptotic intervals)",
        )
    if se is not None:
        report.add_table("standard_errors", se.to_frame(), "Standard errors")
    if crosstab is not None:
        report.add_table("crosstab", crosstab.table, "Clusters by factor")
        report.add_value(
            "association",
            {"chi2": crosstab.chi2, "df": crosstab.df, "p_value": crosstab.p_value},
        )
        report.add_note(
            f"chi2 = {crosstab.chi2!r}, df = {crosstab.df}, p = {crosstab.p_value!r}"
        )
    report.add_note(BIC_CONVENTION)
    report.add_note(SE_CONVENTION)
    return report


def selection_report(grid: SearchGrid) -> Report:
    report = Report(command="select")
    report.add_value("n_cells", grid.n_cells)
    report.add_value("n_failed", len(grid.failures))
    best = grid.best
    if best is not None:
        sizes = [len(c) for c in grid.candidates]
        report.add_value(
            "best",
            {
                "K": best.n_components,
                "P": best.n_regressors,
                "regressor_mask": best.mask_label(sizes),
                "loglik": best.loglik,
                "npar": best.npar,
                "bic": best.bic,
            },
        )
        report.add_value("best_bic", best.bic)
        summary = []
        for K in grid.k_values:
            cell = grid.best_for(K)
            if cell is not None:
                summary.append(
                    {
                        "K": K,
                        "P": cell.n_regressors,
                        "loglik": cell.loglik,
                        "npar": cell.npar,
                        "bic": cell.bic,
                    }
                )
        report.add_table(
            "best_by_k",
            pd.DataFrame(summary, columns=["K", "P", "loglik", "npar", "bic"]).set_index("K"),
            "Best model for each number of components",
        )
    report.add_table("best_by_size", grid.best_by_size(), "Best BIC by K and P")
    report.add_note(BIC_CONVENTION)
    return report


def bootstrap_report(summary: pd.DataFrame, b_requested: int, n_failed: int) -> Report:
    report = Report(command="bootstrap")
    report.add_value("b_requested", b_requested)
    report.add_value("b_succeeded", summary.attrs.get("b_succeeded"))
    report.add_value("n_failed", n_failed)
    report.add_value("level", summary.attrs.get("level"))
    report.add_table("summary", summary, "Bootstrap replicates of the regression coefficients")
    report.add_note("sd uses the denominator B_succeeded - 1; intervals use the percentile method")
    return report


def gradcheck_report(result: GradcheckReport) -> Report:
    report = Report(command="gradcheck")
    frame = pd.DataFrame(
        [
            {
                "max_relative_error": r.max_relative_error,
                "tolerance": r.tolerance,
                "worst_parameter": r.worst_parameter,
                "passed": r.passed,
            }
            for r in (result.score, result.hessian)
        ],
        index=["score", "hessian"],
    )
    report.add_value("passed", result.passed)
    report.add_table("errors", frame, "Finite-difference checks")
    return report
