import os

import pytest

from mixsur.model.em import fit
from mixsur.objects import EmControls
from mixsur.util.datasets import AIS_EQUATIONS, load_ais
from mixsur.util.parsing import ingest


@pytest.fixture(scope="session")
def ais_csv(tmp_path_factory):
    """The AIS file in the BMI, SSF, PBF, LBM, RCC, WCC, PFC, Sex layout."""
    path = tmp_path_factory.mktemp("ais") / "ais.csv"
    load_ais(os.environ["AIS_DATA_PATH"]).to_csv(path, index=False, float_format="%.17g")
    return path


@pytest.fixture(scope="session")
def ais_fit(ais_csv):
    dataset = ingest(ais_csv, AIS_EQUATIONS, n_components=2)
    return fit(dataset, EmControls(n_random_starts=10))
