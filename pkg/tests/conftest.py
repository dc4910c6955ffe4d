import math

import pytest

from distcvp.lattice import make_lattice

HEX = (1.0, math.pi / 3)
PENT = (1.0, 2 * math.pi / 5)
SQUARE = (1.0, math.pi / 2)

# a spread of valid (rho, theta) points, including the c = 0 and c = 1/2 endpoints
GRID = [
    (1.0, math.pi / 3),
    (1.0, 2 * math.pi / 5),
    (1.0, 0.45 * math.pi),
    (1.0, 1.15),
    (1.0, 1.5),
    (1.2, 1.2),
    (1.3, math.acos(0.3 / 1.3)),
    (1.5, math.acos(0.1 / 1.5)),
    (2.0, math.acos(0.25 / 2.0)),
    (1.0, math.pi / 2),
]


@pytest.fixture
def hexagonal():
    return make_lattice(*HEX)


@pytest.fixture
def pent():
    return make_lattice(*PENT)


@pytest.fixture
def square():
    return make_lattice(*SQUARE)


@pytest.fixture(params=GRID, ids=lambda p: f"rho={p[0]:.2f},theta={p[1]:.3f}")
def any_lattice(request):
    return make_lattice(*request.param)

NONRECT_GRID = [p for p in GRID if abs(p[0] * math.cos(p[1])) > 1e-9]
