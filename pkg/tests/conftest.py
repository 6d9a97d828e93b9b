import math

import pytest

from rfidloc import build_scenario

# The table defaults leave every built-in layout dark (see README); these
# sensitivities give partial coverage so estimation paths get exercised.
RELAXED = {"reader_sensitivity_dbm": -130.0, "tag_sensitivity_dbm": -35.0}


@pytest.fixture(scope="session")
def relaxed_corner():
    return build_scenario("corner", math.pi / 3, 3000, "bistatic", RELAXED)


@pytest.fixture(scope="session")
def relaxed_side_mono():
    return build_scenario("side", math.pi / 3, 3000, "monostatic", RELAXED)
