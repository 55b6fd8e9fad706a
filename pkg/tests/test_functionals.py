import math

import numpy as np
import pytest

from functionals import Functional, parse_functional


def test_parse_and_evaluate():
    x = np.array([0.1, 0.3, 0.7, math.inf])
    assert parse_functional("1")(x).tolist() == [1, 1, 1, 1]
    assert parse_functional("ge:0.3")(x).tolist() == [0, 1, 1, 1]
    assert parse_functional("gt:0.3")(x).tolist() == [0, 0, 1, 1]
    assert parse_functional("le:0.3")(x).tolist() == [1, 1, 0, 0]
    assert parse_functional("finite")(x).tolist() == [1, 1, 1, 0]


def test_sup_uses_running_max():
    f = parse_functional("sup_le:1")
    assert f(np.array([0.5, 0.5]), np.array([0.9, 1.5])).tolist() == [1, 0]
    assert f(np.array([2.0])).tolist() == [0]


def test_grid_interpolates():
    f = parse_functional("grid:0,0;1,2;2,2")
    assert f(np.array([0.5, 5.0, math.inf])).tolist() == pytest.approx([1.0, 2.0, 2.0])
    assert f.tag == "grid:0,0;1,2;2,2"


def test_tags_and_bounded():
    assert parse_functional("ge:0.7").tag == "ge:0.7"
    assert parse_functional("one").tag == "one"
    assert not parse_functional("identity").bounded
    assert parse_functional(Functional("ge", 1.0)).level == 1.0


@pytest.mark.parametrize("tag", ["ge", "ge:x", "median", "grid:1"])
def test_malformed(tag):
    with pytest.raises(ValueError):
        parse_functional(tag)
