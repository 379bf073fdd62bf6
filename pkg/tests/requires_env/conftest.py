import os
from pathlib import Path

import pytest
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv(override=True)


def pytest_collection_modifyitems(config, items):
    """Skip tests if the AIS data file is not available."""
    path = os.environ.get("AIS_DATA_PATH", "")
    if not path or not Path(path).exists():
        skip_marker = pytest.mark.skip(reason="AIS_DATA_PATH is not set to an existing file")
        for item in items:
            if "requires_env" in str(item.path):
                item.add_marker(skip_marker)
