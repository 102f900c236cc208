"""Declarative configuration structs."""

import functools
import logging
import operator
from pathlib import Path
from typing import Any, List, Tuple

from flint_tsr.types import ConfigType

logger = logging.getLogger(__name__)


class ConfigStruct:
    """Represent a flat configuration record. Subclass it to use it.

    Members are declared as class attributes holding a ConfigType; their declaration order is the order used
    when the struct is written out. On an instance a member attribute reads the parsed value, and assigning it is
    validated like item assignment.

    Examples:
        from flint_tsr.struct import ConfigStruct
        from flint_tsr.types import Float, Int

        class MyConfig(ConfigStruct):
            epochs = Int(low=1, default=10)
            rate = Float(low=0.0, default=1e-3)

        cfg = MyConfig(epochs=20)
    """

    type_name = None

    def __init__(self, **kwargs):
        """Initialize the struct, then run the struct-level consistency check."""
        members = dict(self.get_members())
        unknown = set(kwargs) - set(members)
        if unknown:
            raise KeyError(f'"{sorted(unknown)[0]}" is not defined for {self.type_name}.')
        self.values = {}
        for name, typ in members.items():
            self.values[name] = typ.parse_value(kwargs.get(name))
        self.check()

    @classmethod
    def __init_subclass__(cls, **kwargs):
        """Initialize the subclass."""
        super().__init_subclass__(**kwargs)
        cls.type_name = cls.__name__

    def check(self) -> None:
        """Validate relations between members. Subclasses override this; the base accepts everything."""

    def data_dict(self) -> dict:
        """Provide the entire data dictionary representing the struct."""
        return {k: list(v) if isinstance(v, list) else v for k, v in self.values.items()}

    def replace(self, **kwargs) -> "ConfigStruct":
        """Return a copy of this struct with some members changed."""
        return type(self)(**{**self.data_dict(), **kwargs})

    @classmethod
    def encode_type(cls) -> str:
        """Get the type signature of the struct, e.g. ``TrainConfig(int max_epochs,float base_lr)``."""
        member_sigs = [f"{typ.type_name} {name}" for name, typ in cls.get_members()]
        return f'{cls.type_name}({",".join(member_sigs)})'

    @classmethod
    def get_members(cls) -> List[Tuple[str, ConfigType]]:
        """Return a list of tuples of supported parameters, inherited members first.

        Each tuple is (<parameter_name>, <parameter_type>).
        """
        members = {}
        for klass in reversed(cls.__mro__):
            for name, attr in vars(klass).items():
                if isinstance(attr, ConfigType):
                    members[name] = attr
        return list(members.items())

    def to_text(self) -> str:
        """Render the struct as flat ``key = value`` lines."""
        members = dict(self.get_members())
        lines = [f"# {self.type_name}"]
        lines += [f"{name} = {members[name].format_value(value)}" for name, value in self.values.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, strict: bool = False) -> "ConfigStruct":
        """Build a struct from flat ``key = value`` text.

        Blank lines and ``#`` comments are skipped. Keys that are not members are ignored, so one file can carry
        several structs, unless ``strict`` is set.

        Args:
            text (str): The config text.
            strict (bool, optional): Reject unknown keys. Defaults to False.

        Returns:
            ConfigStruct: The parsed struct.
        """
        member_names = {name for name, _ in cls.get_members()}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in member_names:
                if strict:
                    raise KeyError(f'line {lineno}: "{key}" is not defined for {cls.type_name}.')
                continue
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, strict: bool = False) -> "ConfigStruct":
        """Read a struct from a config file."""
        text = Path(path).read_text(encoding="utf-8")
        logger.debug("reading %s from %s", cls.type_name, path)
        return cls.from_text(text, strict=strict)

    @classmethod
    def _assert_key_is_member(cls, key):
        member_names = {tup[0] for tup in cls.get_members()}
        if key not in member_names:
            raise KeyError(f'"{key}" is not defined for this struct.')

    def __getitem__(self, key):
        """Return the underlying value dictionary."""
        self._assert_key_is_member(key)
        return self.values.__getitem__(key)

    def __setitem__(self, key, value: Any):
        """Set a member after parsing it with the member type, then re-check the struct."""
        self._assert_key_is_member(key)
        typ = dict(self.get_members())[key]
        previous = self.values[key]
        self.values[key] = typ.parse_value(value)
        try:
            self.check()
        except ValueError:
            self.values[key] = previous
            raise

    def __delitem__(self, _):
        """Disallow deleting an entry."""
        raise TypeError("Deleting entries from a ConfigStruct is not allowed.")

    def __eq__(self, other):
        """Equality is determined by type signature and values."""
        if self is other:
            return True
        if not isinstance(other, ConfigStruct):
            return False
        return self.encode_type() == other.encode_type() and self.values == other.values

    def __hash__(self):
        """Hash is determined by the type name and value hash."""
        value_hashes = [hash(k) ^ hash(tuple(v) if isinstance(v, list) else v) for k, v in self.values.items()]
        return functools.reduce(operator.xor, value_hashes, hash(self.type_name))

    def __repr__(self):
        """Show the struct name and values."""
        body = ", ".join(f"{k}={v!r}" for k, v in self.values.items())
        return f"{self.type_name}({body})"
