import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run full-size sweeps (minutes each)",
    )


@pytest.fixture
def slow(request):
    if not request.config.getoption("--run-slow"):
        pytest.skip("--run-slow not provided")
