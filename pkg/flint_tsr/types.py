"""Typed configuration members."""

import re
from typing import Any

# allow magic value comparison
# ruff: noqa: PLR2004


class ConfigType:
    """The base type for members of a config struct.

    Generally you wouldn't use this - instead, see the subclasses below. Or you may want a ConfigStruct instead.
    """

    type_name = None
    name = None

    def __init__(self, type_name: str, none_val: Any, default: Any = None):
        """Initialize the type."""
        self.type_name = type_name
        self.none_val = none_val
        self.default = None if default is None else self.parse_value(default)

    def __set_name__(self, owner, name: str):
        """Remember the member name the type was declared under."""
        self.name = name

    def __get__(self, instance, owner=None):
        """On a struct instance, read the parsed member value; on the class, return the declaration."""
        if instance is None:
            return self
        return instance.values[self.name]

    def __set__(self, instance, value):
        """Assigning a member goes through the struct's validated item assignment."""
        instance[self.name] = value

    def parse_value(self, value=None) -> Any:
        """Given a value, verify it and convert it into the python value used by the config.

        Args:
            value (Any): A python value or its text form.

        Returns:
            Any: The validated value. ``None`` resolves to the member default, then to the type's empty value.
        """
        if value is None:
            value = self.none_val if self.default is None else self.default
            # lists are copied so struct instances never share them
            return list(value) if isinstance(value, list) else value
        return self._parse_value(value)

    def _parse_value(self, value) -> Any:
        """Must be implemented by subclasses, handles parsing on a case-by-case basis.

        Don't call this directly - use .parse_value(value) instead.
        """
        raise NotImplementedError("Subclasses must implement this method.")

    def format_value(self, value) -> str:
        """Render a parsed value in the flat ``key = value`` text form."""
        return str(value)

    def __eq__(self, other):
        """Equality is determined by type equality."""
        self_type = getattr(self, "type_name")
        other_type = getattr(other, "type_name", None)

        return self_type is not None and self_type == other_type

    def __hash__(self):
        """Hash is determined by the type name."""
        return hash(self.type_name)


class Array(ConfigType):
    """Represent an array member type.

    This class can represent both fixed and dynamic arrays of a specific member type.

    Args:
        member_type (ConfigType): The type of the array members.
        fixed_length (int, optional): The number of elements if it is a fixed-length array.
            Defaults to 0, which represents a dynamic array.
        default (Any, optional): Default value of the member.

    Examples:
        a1 = Array(Int())       # int[] a1
        a2 = Array(Float(), 3)  # float[3] a2
    """

    def __init__(self, member_type: ConfigType, fixed_length: int = 0, default: Any = None):
        """Initialize an instance of the Array class representing an array member type."""
        fixed_length = assert_int(fixed_length)
        if fixed_length == 0:
            type_name = f"{member_type.type_name}[]"
        else:
            type_name = f"{member_type.type_name}[{fixed_length}]"
        self.member_type = member_type
        self.fixed_length = fixed_length
        super().__init__(type_name, [], default)

    def _parse_value(self, value):
        """Split text on commas, then parse every item with the member type."""
        if isinstance(value, str):
            items = [v.strip() for v in value.split(",") if v.strip()]
        else:
            items = list(value)
        parsed = [self.member_type.parse_value(v) for v in items]
        if self.fixed_length and len(parsed) != self.fixed_length:
            raise ValueError(f"{self.type_name} was given {len(parsed)} values")
        return parsed

    def format_value(self, value) -> str:
        """Arrays are rendered comma separated."""
        return ",".join(self.member_type.format_value(v) for v in value)


class Boolean(ConfigType):
    """Represent a bool type."""

    def __init__(self, default: Any = None):
        """Initialize a bool type."""
        super().__init__("bool", False, default)

    def _parse_value(self, value):
        """Booleans accept python bools and the words true/false, yes/no, 1/0."""
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "yes", "1"):
            return True
        if text in ("false", "no", "0"):
            return False
        raise ValueError(f"Must be True or False. Got: {value}")

    def format_value(self, value) -> str:
        """Booleans are written lower case."""
        return "true" if value else "false"


class Choice(ConfigType):
    """Represent a string restricted to a fixed set of options.

    Examples:
        mode = Choice("supervised", "unsupervised", "hyper")
    """

    def __init__(self, *options: str, default: Any = None):
        """Initialize a choice type."""
        if not options:
            raise ValueError("At least one option must be given.")
        self.options = tuple(options)
        super().__init__(f"choice({'|'.join(options)})", options[0], default)

    def _parse_value(self, value):
        """Choices must be one of the declared options."""
        text = str(value).strip()
        if text not in self.options:
            raise ValueError(f"Must be one of {', '.join(self.options)}. Got: {value}")
        return text


class Float(ConfigType):
    """Represent a real-valued type.

    Bounds may be given to validate the value.

    Examples:
        f1 = Float()                 # float f1
        f2 = Float(low=0.0)          # float f2, nonnegative
        f3 = Float(low=0.0, high=1)  # float f3 in [0, 1]
    """

    def __init__(self, low: float | None = None, high: float | None = None, default: Any = None):
        """Initialize a float type."""
        self.low = low
        self.high = high
        super().__init__("float", 0.0, default)

    def _parse_value(self, value):
        """Floats are range checked against the declared bounds."""
        try:
            v = float(value)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"Expected a float, got {value}") from exc
        if self.low is not None and v < self.low:
            raise ValueError(f"Value {v} is below the lower bound {self.low}")
        if self.high is not None and v > self.high:
            raise ValueError(f"Value {v} is above the upper bound {self.high}")
        return v

    def format_value(self, value) -> str:
        """Floats are written with full precision."""
        return repr(float(value))


class Int(ConfigType):
    """Represent an integer type.

    A lower bound may be given to validate the value.

    Examples:
        i1 = Int()         # int i1
        i2 = Int(low=1)    # int i2, positive
    """

    def __init__(self, low: int | None = None, default: Any = None):
        """Initialize an int type."""
        self.low = low
        super().__init__("int", 0, default)

    def _parse_value(self, value):
        """Ints are checked against the lower bound."""
        v = assert_int(value)
        if self.low is not None and v < self.low:
            raise ValueError(f"Value {v} is below the lower bound {self.low}")
        return v


def assert_int(value) -> int:
    """Convert to int, raising an error if unable."""
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"Expected an int, got {value}")
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"Expected an int, got {value}") from exc


# This helper dict maps type names to our ConfigType classes
config_type_map = {
    "bool": Boolean,
    "float": Float,
    "int": Int,
}


def from_type_name(type_name: str) -> ConfigType | None:
    """Convert a string such as ``float[3]`` into the ConfigType implementation. Basic types only."""
    pattern = r"([a-z]+)(\[(\d+)?\])?$"
    match = re.match(pattern, type_name.strip())

    if match is None:
        return None

    # base_name     # The type name, like the "float" in "float[3]"
    # is_array      # Basically just checks for square brackets
    # array_len     # For fixed length arrays only, this is the length
    base_name, is_array, array_len = match.groups()

    if base_name not in config_type_map:
        return None

    type_instance = config_type_map[base_name]()
    if is_array:
        return Array(type_instance, int(array_len)) if array_len else Array(type_instance)
    return type_instance
