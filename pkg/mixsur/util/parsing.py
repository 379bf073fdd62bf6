import json
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from mixsur.objects import (
    ConfigError,
    Dataset,
    EmControls,
    EmptyData,
    IngestError,
    MissingColumn,
    ModelSpec,
    ParseError,
)

DELIMITERS = (",", ";", "\t")


class EquationBinding(BaseModel):
    response: str = Field(description="Column holding the response of this equation.")
    regressors: list[str] = Field(
        default_factory=list, description="Columns used as regressors (or candidates) of this equation."
    )


class RunConfig(BaseModel):
    """
    Everything a command needs. Loaded from a JSON document; command-line flags
    override the values in the file.
    """

    data: str | None = Field(default=None, description="Path of the delimited data file.")
    delimiter: str | None = Field(
        default=None, description="Field delimiter; detected from the header when unset."
    )
    equations: list[EquationBinding] = Field(
        default_factory=list, description="One binding per equation, in order."
    )
    factor: str | None = Field(
        default=None, description="Optional column cross-tabulated against the MAP clusters."
    )
    k: int = Field(default=1, ge=1, description="Number of mixture components for fit and bootstrap.")
    k_range: list[int] = Field(
        default_factory=lambda: [1], description="Component counts tried by select."
    )
    em: EmControls = Field(default_factory=EmControls)
    bootstrap_b: int = Field(default=0, ge=0, description="Number of bootstrap replicates.")
    level: float = Field(default=0.95, gt=0, lt=1, description="Confidence level.")
    out: str = Field(default="mixsur_out", description="Directory for the report files.")
    formats: list[Literal["text", "json"]] = Field(default_factory=lambda: ["text", "json"])
    theta: str | None = Field(
        default=None, description="Path of a parameter JSON file (simulate, gradcheck)."
    )
    deny_unidentifiable: bool = Field(
        default=False, description="Refuse to fit models that fail the identifiability check."
    )
    slow: bool = Field(default=False, description="Allow large grids and bootstrap runs.")

    @field_validator("k_range")
    @classmethod
    def _check_k_range(cls, value):
        if not value or min(value) < 1:
            raise ValueError("k_range must contain positive component counts")
        return sorted(set(value))

    @model_validator(mode="after")
    def _check_delimiter(self):
        if self.delimiter is not None and len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")
        return self

    @property
    def response_columns(self) -> list[str]:
        return [e.response for e in self.equations]

    def to_json(self) -> dict:
        return self.model_dump()

    @classmethod
    def from_json(cls, json_data: dict) -> "RunConfig":
        try:
            return cls.model_validate(json_data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}")


def load_run_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a JSON configuration (if given) and apply the non-None `overrides`."""
    json_data = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                json_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read configuration {path}: {e}")
        if not isinstance(json_data, dict):
            raise ConfigError("Configuration must be a JSON object")

    for key, value in overrides.items():
        if value is None:
            continue
        if key == "em":
            json_data["em"] = {**json_data.get("em", {}), **value}
        else:
            json_data[key] = value
    return RunConfig.from_json(json_data)


def parse_equation(text: str) -> EquationBinding:
    """'BMI=RCC,PFC' -> EquationBinding(response='BMI', regressors=['RCC', 'PFC'])."""
    if "=" in text:
        response, regressors = text.split("=", 1)
    else:
        response, regressors = text, ""
    response = response.strip()
    if not response:
        raise ConfigError(f"Equation '{text}' has no response")
    names = [r.strip() for r in regressors.split(",") if r.strip()]
    return EquationBinding(response=response, regressors=names)


def parse_k_range(text: str) -> list[int]:
    """'1-3' -> [1, 2, 3]; '1,3' -> [1, 3]."""
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"Cannot read component range '{text}'")
    if not values or min(values) < 1:
        raise ConfigError(f"Component range '{text}' must list positive counts")
    return values


def detect_delimiter(header: str) -> str:
    """The delimiter among comma, semicolon and tab occurring most often in the header."""
    counts = {d: header.count(d) for d in DELIMITERS}
    best = max(DELIMITERS, key=lambda d: counts[d])
    return best if counts[best] > 0 else ","


def read_frame(path: str | Path, delimiter: str | None = None) -> pd.DataFrame:
    """Read a delimited text file with a header row, every cell as a string."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            header = f.readline()
    except OSError as e:
        raise IngestError(f"Could not read {path}: {e}")
    if not header.strip():
        raise EmptyData(f"{path} is empty")
    if delimiter is None:
        delimiter = detect_delimiter(header)
    frame = pd.read_csv(path, sep=delimiter, dtype=str, skipinitialspace=True)
    frame.columns = [str(c).strip() for c in frame.columns]
    if frame.empty:
        raise EmptyData(f"{path} has a header but no data rows")
    return frame


def numeric_columns(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    """
    Parse `columns` as numbers with '.' as decimal point. Every offending cell is reported,
    with rows numbered from 1 after the header.
    """
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MissingColumn(missing, list(frame.columns))
    if not columns:
        return np.zeros((len(frame), 0))

    bad = []
    values = {}
    for column in columns:
        raw = frame[column].str.strip()
        parsed = pd.to_numeric(raw, errors="coerce")
        invalid = parsed.isna() | ~np.isfinite(parsed.fillna(0.0).to_numpy())
        for row in np.flatnonzero(invalid.to_numpy()):
            bad.append((int(row) + 1, column))
        if not invalid.any():
            # to_numeric is not correctly rounded; float() on the validated text is
            values[column] = raw.astype(float).to_numpy()
    if bad:
        raise ParseError(sorted(bad))
    return np.column_stack([values[c] for c in columns])


def _unique(names: Sequence[str]) -> list[str]:
    return list(dict.fromkeys(names))


def bind_columns(
    equations: Sequence[EquationBinding], n_components: int = 1
) -> tuple[list[str], ModelSpec]:
    """Regressor pool (unique names in order of first appearance) and the matching spec."""
    if not equations:
        raise ConfigError("At least one equation must be given")
    pool_names = _unique([r for e in equations for r in e.regressors])
    position = {name: j for j, name in enumerate(pool_names)}
    spec = ModelSpec(
        regressors=tuple(tuple(position[r] for r in e.regressors) for e in equations),
        n_components=n_components,
        response_names=tuple(e.response for e in equations),
        regressor_names=tuple(pool_names),
    )
    return pool_names, spec


def ingest(
    path: str | Path,
    equations: Sequence[EquationBinding],
    n_components: int = 1,
    delimiter: str | None = None,
) -> Dataset:
    """
    Load a delimited file into a Dataset bound to `equations`.

    A regressor named in several equations becomes one shared pool column.

    Raises:
        MissingColumn: a bound column is not in the header.
        ParseError: some bound cells are not numbers (all are listed).
        EmptyData: the file has no data rows.
    """
    frame = read_frame(path, delimiter)
    pool_names, spec = bind_columns(equations, n_components)
    responses = [e.response for e in equations]
    missing = [c for c in _unique(responses + pool_names) if c not in frame.columns]
    if missing:
        raise MissingColumn(missing, list(frame.columns))

    try:
        Y = numeric_columns(frame, responses)
        pool = numeric_columns(frame, pool_names)
    except ParseError as first:
        # report every bad cell of every bound column together
        cells = []
        for columns in (responses, pool_names):
            try:
                numeric_columns(frame, columns)
            except ParseError as e:
                cells.extend(e.cells)
        raise ParseError(sorted(set(cells))) from first
    return Dataset(Y=Y, pool=pool, spec=spec)


def read_factor(
    path: str | Path, column: str, delimiter: str | None = None
) -> pd.Series:
    frame = read_frame(path, delimiter)
    if column not in frame.columns:
        raise MissingColumn([column], list(frame.columns))
    return frame[column].str.strip().rename(column)
