import pandas as pd
import pytest


@pytest.fixture
def toy_csv(tmp_path):
    """A small two-equation data file with a shared regressor and a factor column."""

    def _write(name="toy.csv", sep=",", rows=None):
        frame = pd.DataFrame(
            rows
            or {
                "a": [1.0, 2.5, 3.0, 4.5, 5.0, 6.5],
                "b": [0.2, 0.1, 0.4, 0.3, 0.6, 0.5],
                "x": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                "z": [0.5, -0.5, 0.25, -0.25, 0.0, 1.0],
                "g": ["m", "f", "m", "f", "m", "f"],
            }
        )
        path = tmp_path / name
        frame.to_csv(path, sep=sep, index=False)
        return path

    return _write
