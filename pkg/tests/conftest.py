import pytest

from salseg import tensor


@pytest.fixture(autouse=True)
def finite_guard():
    tensor.set_finite_checks(True)
    yield
    tensor.set_finite_checks(False)
