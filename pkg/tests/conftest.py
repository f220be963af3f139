import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynact._backend import available_backends


@pytest.fixture(params=sorted(available_backends()))
def kernels(request):
    """Run a test against every kernel backend built in this checkout."""
    return available_backends()[request.param]


@pytest.fixture(params=sorted(available_backends()))
def tree_factory(request):
    return available_backends()[request.param].RBTree
