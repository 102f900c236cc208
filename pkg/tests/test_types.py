"""Test config member types."""

import pytest

from flint_tsr import Array, Boolean, Choice, ConfigStruct, Float, Int
from flint_tsr.types import assert_int, from_type_name

# allow magic value comparison
# ruff: noqa: PLR2004
# allow redefining outer name for fixtures
# pylint: disable=redefined-outer-name
# allow classes without docstrings
# ruff: noqa: D101
# pylint: disable=missing-class-docstring
# allow functions without docstrings
# pylint: disable=missing-function-docstring
# allow classes with no methods
# pylint: disable=too-few-public-methods


def test_int_validation():
    assert Int().type_name == "int"
    assert Int().parse_value("12") == 12
    assert Int().parse_value(3.0) == 3
    assert Int(low=1).parse_value(1) == 1

    with pytest.raises(ValueError, match="lower bound"):
        Int(low=1).parse_value(0)
    with pytest.raises(ValueError, match="Expected an int"):
        Int().parse_value(2.5)
    with pytest.raises(ValueError, match="Expected an int"):
        Int().parse_value("two")


def test_float_validation():
    f = Float(low=0.0, high=1.0)
    assert f.type_name == "float"
    assert f.parse_value("0.25") == 0.25
    assert f.parse_value(1) == 1.0

    with pytest.raises(ValueError, match="below the lower bound"):
        f.parse_value(-0.1)
    with pytest.raises(ValueError, match="above the upper bound"):
        f.parse_value(1.5)
    with pytest.raises(ValueError, match="Expected a float"):
        f.parse_value("fast")


def test_boolean_validation():
    b = Boolean()
    assert b.type_name == "bool"
    for text in ("true", "Yes", "1", True):
        assert b.parse_value(text) is True
    for text in ("false", "NO", "0", False):
        assert b.parse_value(text) is False
    assert b.format_value(True) == "true"

    with pytest.raises(ValueError, match="Must be True or False"):
        b.parse_value("maybe")


def test_choice_validation():
    c = Choice("direct", "gap")
    assert c.type_name == "choice(direct|gap)"
    assert c.parse_value(" gap ") == "gap"
    assert c.parse_value(None) == "direct"

    with pytest.raises(ValueError, match="Must be one of direct, gap"):
        c.parse_value("scaled")
    with pytest.raises(ValueError, match="At least one option"):
        Choice()


def test_array_types():
    assert Array(Int()).type_name == "int[]"
    assert Array(Float(), 3).type_name == "float[3]"
    assert Array(Int()).parse_value("1, 2,3") == [1, 2, 3]
    assert Array(Float(), 2).parse_value([1, "2.5"]) == [1.0, 2.5]
    assert Array(Float()).format_value([0.5, 1.0]) == "0.5,1.0"

    with pytest.raises(ValueError, match="was given 3 values"):
        Array(Float(), 2).parse_value("1,2,3")
    with pytest.raises(ValueError, match="lower bound"):
        Array(Int(low=16)).parse_value("32,8")


def test_defaults_are_not_shared():
    class Shape(ConfigStruct):
        dims = Array(Int(), default=[32, 32])

    first, second = Shape(), Shape()
    first.dims.append(7)
    assert second.dims == [32, 32]
    assert Shape().dims == [32, 32]


def test_default_is_validated():
    with pytest.raises(ValueError, match="lower bound"):
        Int(low=2, default=1)


def test_assert_int():
    assert assert_int("7") == 7
    assert assert_int(4.0) == 4
    with pytest.raises(ValueError):
        assert_int(None)


def test_type_equality():
    assert Int() == Int(low=5)
    assert Float() != Int()
    assert Array(Int()) == Array(Int())
    assert Array(Int()) != Array(Int(), 2)
    assert hash(Float()) == hash(Float(low=1.0))


@pytest.mark.parametrize(
    "type_name, expected",
    [
        ("int", Int()),
        ("float", Float()),
        ("bool", Boolean()),
        ("float[]", Array(Float())),
        ("int[3]", Array(Int(), 3)),
    ],
)
def test_from_type_name(type_name, expected):
    assert from_type_name(type_name) == expected


def test_from_type_name_unknown():
    assert from_type_name("uint256") is None
    assert from_type_name("tensor[2]") is None
    assert from_type_name("[]") is None
    assert from_type_name("string") is None
