import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--slow",
        action="store_true",
        default=False,
        help="run Monte Carlo acceptance runs and other long tests",
    )


def pytest_collection_modifyitems(config, items):
    """Skip tests marked slow unless --slow is given."""
    if config.getoption("--slow"):
        return
    skip_marker = pytest.mark.skip(reason="slow test, use --slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_marker)
