"""
The Australian Institute of Sport (AIS) athletes data: conversion of the public CSV,
a download helper, and a synthetic stand-in with the same columns for offline use.
"""

import io
from pathlib import Path

import httpx
import numpy as np
import pandas as pd

from mixsur.config import Settings
from mixsur.config import settings as environment_settings
from mixsur.inference.bootstrap import simulate
from mixsur.objects import IngestError, MissingColumn, ModelSpec, Theta
from mixsur.util.parsing import EquationBinding, bind_columns

AIS_URL = "https://vincentarelbundock.github.io/Rdatasets/csv/DAAG/ais.csv"

AIS_COLUMNS = {
    "bmi": "BMI",
    "ssf": "SSF",
    "pcBfat": "PBF",
    "lbm": "LBM",
    "rcc": "RCC",
    "wcc": "WCC",
    "ferr": "PFC",
    "sex": "Sex",
}
AIS_RESPONSES = ["BMI", "SSF", "PBF", "LBM"]
AIS_REGRESSORS = ["RCC", "WCC", "PFC"]

# best two-component model: BMI, PBF and LBM on RCC and PFC, SSF on RCC
AIS_EQUATIONS = [
    EquationBinding(response="BMI", regressors=["RCC", "PFC"]),
    EquationBinding(response="SSF", regressors=["RCC"]),
    EquationBinding(response="PBF", regressors=["RCC", "PFC"]),
    EquationBinding(response="LBM", regressors=["RCC", "PFC"]),
]


def ais_candidate_equations() -> list[EquationBinding]:
    """Every response with all three candidate regressors, for the exhaustive search."""
    return [EquationBinding(response=r, regressors=list(AIS_REGRESSORS)) for r in AIS_RESPONSES]


def ais_reference_theta() -> Theta:
    """Published estimates of the best AIS model, components in canonical order."""
    sigma_1 = np.array(
        [
            [3.96, 5.14, -0.09, 18.99],
            [5.14, 169.94, 31.21, 2.63],
            [-0.09, 31.21, 7.10, -8.73],
            [18.99, 2.63, -8.73, 138.82],
        ]
    )
    sigma_2 = np.array(
        [
            [6.85, 17.43, 0.89, 14.59],
            [17.43, 744.38, 107.03, -54.50],
            [0.89, 107.03, 17.88, -15.05],
            [14.59, -54.50, -15.05, 67.07],
        ]
    )
    return Theta(
        weights=np.array([0.619, 0.381]),
        beta=np.array([2.286, 0.013, -7.746, -2.724, -0.005, 14.211, 0.052]),
        intercepts=np.array(
            [
                [10.04, 86.57, 23.19, -7.02],
                [12.99, 136.43, 32.52, -4.88],
            ]
        ),
        covariances=np.stack([sigma_1, sigma_2]),
    )


def ais_spec(n_components: int = 2) -> tuple[list[str], ModelSpec]:
    return bind_columns(AIS_EQUATIONS, n_components)


def convert_ais(frame: pd.DataFrame) -> pd.DataFrame:
    """Rename the public column layout to BMI, SSF, PBF, LBM, RCC, WCC, PFC, Sex."""
    schema = list(AIS_COLUMNS.values())
    if all(c in frame.columns for c in schema):
        return frame[schema].reset_index(drop=True)
    missing = [c for c in AIS_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingColumn(missing, list(frame.columns))
    return frame[list(AIS_COLUMNS)].rename(columns=AIS_COLUMNS).reset_index(drop=True)


def load_ais(path: str | Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except OSError as e:
        raise IngestError(f"Could not read {path}: {e}")
    return convert_ais(frame)


def fetch_ais(
    dest: str | Path,
    url: str = AIS_URL,
    timeout: float = 30.0,
    settings: Settings | None = None,
) -> Path:
    """Download the public AIS CSV, convert it and write it to `dest`."""
    if settings is None:
        settings = environment_settings
    dest = Path(dest)
    settings.logger.info(f"Downloading AIS data from {url}")
    response = httpx.get(url, timeout=timeout, follow_redirects=True)
    response.raise_for_status()
    frame = convert_ais(pd.read_csv(io.StringIO(response.text), float_precision="round_trip"))
    dest.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(dest, index=False)
    settings.logger.info(f"Wrote {len(frame)} athletes to {dest}")
    return dest


def make_ais_standin(seed: int = 0, n_obs: int = 202) -> pd.DataFrame:
    """
    Synthetic data with the AIS columns, drawn from the published best model.

    Regressors follow rough marginals of the real athletes: RCC ~ N(4.72, 0.46),
    WCC ~ N(7.1, 1.8) and PFC log-normal with mean about 76 and sd about 47.
    Sex depends on the component as in the published cross-classification.
    """
    rng = np.random.default_rng(seed)
    rcc = rng.normal(4.72, 0.46, n_obs)
    wcc = rng.normal(7.1, 1.8, n_obs)
    pfc_sigma = np.sqrt(np.log(1 + (47.0 / 76.0) ** 2))
    pfc = rng.lognormal(np.log(76.0) - pfc_sigma**2 / 2, pfc_sigma, n_obs)

    pool_names, spec = ais_spec(2)
    columns = {"RCC": rcc, "WCC": wcc, "PFC": pfc}
    pool = np.column_stack([columns[name] for name in pool_names])
    dataset, labels = simulate(
        ais_reference_theta(), pool, spec, seed=rng, return_labels=True
    )

    male_probability = np.where(labels == 0, 86 / 125, 16 / 77)
    sex = np.where(rng.random(n_obs) < male_probability, "m", "f")

    frame = pd.DataFrame(dataset.Y, columns=AIS_RESPONSES)
    frame["RCC"] = rcc
    frame["WCC"] = wcc
    frame["PFC"] = pfc
    frame["Sex"] = sex
    return frame
