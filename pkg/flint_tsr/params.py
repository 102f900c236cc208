"""Named model parameters and the checkpoint container.

A checkpoint is two files: ``<name>`` holds the tensors as concatenated FLG1 records (one component, the tensor's
own rank) and ``<name>.idx`` is a text index. The index lists one ``tensor`` line per entry, in insertion order,
followed by the configuration structs the model was built from.
"""

import logging
from collections.abc import MutableMapping
from pathlib import Path
from typing import Dict, Iterator, NamedTuple, Type

import numpy as np

from flint_tsr.fieldio import FormatError, decode_raw, encode_raw
from flint_tsr.struct import ConfigStruct
from flint_tsr.tensor import Node

logger = logging.getLogger(__name__)

INDEX_SUFFIX = ".idx"
_HEADER = "# flint-tsr checkpoint"


class ModelParams(MutableMapping):
    """Ordered mapping of tensor name to Node, plus the config structs that describe the model.

    Entries whose node does not require gradients are buffers (e.g. standardization statistics); the optimizer
    skips them but they are checkpointed like any other tensor.
    """

    def __init__(self, *configs: ConfigStruct):
        """Create an empty collection carrying the given configs."""
        self._nodes: Dict[str, Node] = {}
        self.configs: Dict[str, ConfigStruct] = {cfg.type_name: cfg for cfg in configs}

    def __getitem__(self, name: str) -> Node:
        """Look up a tensor by name."""
        return self._nodes[name]

    def __setitem__(self, name: str, node: Node):
        """Add or replace a tensor."""
        if not isinstance(node, Node):
            raise TypeError(f"{name}: expected a Node, got {type(node).__name__}")
        node.name = name
        self._nodes[name] = node

    def __delitem__(self, name: str):
        """Remove a tensor."""
        del self._nodes[name]

    def __iter__(self) -> Iterator[str]:
        """Names in insertion order."""
        return iter(self._nodes)

    def __len__(self) -> int:
        """Number of tensors."""
        return len(self._nodes)

    def get_config(self, cls: Type[ConfigStruct]) -> ConfigStruct:
        """The stored config of the given struct class."""
        if cls.type_name not in self.configs:
            raise KeyError(f'"{cls.type_name}" is not stored with these parameters.')
        return self.configs[cls.type_name]

    def trainable(self) -> Dict[str, Node]:
        """Tensors that take gradients."""
        return {name: node for name, node in self._nodes.items() if node.requires_grad}

    def count(self) -> int:
        """Total number of trainable scalar entries."""
        return sum(node.size for node in self.trainable().values())

    def zero_grad(self) -> None:
        """Reset every gradient."""
        for node in self._nodes.values():
            node.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copy of every tensor's values."""
        return {name: node.data.copy() for name, node in self._nodes.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        """Write values from a snapshot back into the existing nodes."""
        for name, values in snapshot.items():
            node = self._nodes[name]
            if node.shape != values.shape:
                raise ValueError(f"{name}: snapshot shape {values.shape} does not match {node.shape}")
            node.data[...] = values


class Checkpoint(NamedTuple):
    """A loaded checkpoint: the parameters with their configs attached."""

    params: ModelParams
    sections: Dict[str, str]


def index_path(path: str | Path) -> Path:
    """Path of the text index that accompanies a checkpoint file."""
    path = Path(path)
    return path.with_name(path.name + INDEX_SUFFIX)


def save_checkpoint(params: ModelParams, path: str | Path, *extra: ConfigStruct) -> None:
    """Write the tensors (float32) and the text index. Extra structs are stored next to the model's own configs."""
    path = Path(path)
    lines = [_HEADER]
    blobs, offset = [], 0
    for name, node in params.items():
        data = node.data if node.ndim else node.data.reshape(1)
        payload = encode_raw(data)
        shape = "x".join(str(n) for n in node.shape) or "scalar"
        kind = "param" if node.requires_grad else "buffer"
        lines.append(f"tensor {name} {shape} {offset} {kind}")
        blobs.append(payload)
        offset += len(payload)
    for cfg in list(params.configs.values()) + list(extra):
        lines.append(cfg.to_text().rstrip("\n"))
    path.write_bytes(b"".join(blobs))
    index_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("saved %d tensors to %s", len(params), path)


def _split_sections(lines) -> Dict[str, str]:
    sections: Dict[str, list] = {}
    current = None
    for line in lines:
        if line.startswith("# ") and line != _HEADER:
            current = line[2:].strip()
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {name: "\n".join(body) + "\n" for name, body in sections.items()}


def load_checkpoint(path: str | Path, *config_types: Type[ConfigStruct]) -> Checkpoint:
    """Read a checkpoint back.

    Args:
        path (str | Path): The tensor file; its index is found next to it.
        *config_types (Type[ConfigStruct]): Struct classes to rebuild from the index and attach to the params.

    Returns:
        Checkpoint: The parameters plus the raw config sections by struct name.
    """
    path = Path(path)
    payload = path.read_bytes()
    lines = index_path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _HEADER:
        raise FormatError(f"{index_path(path)}: not a checkpoint index")
    sections = _split_sections(lines)
    configs = [cls.from_text(sections[cls.type_name]) for cls in config_types if cls.type_name in sections]
    params = ModelParams(*configs)
    for line in lines[1:]:
        if not line.startswith("tensor "):
            continue
        _, name, shape, offset, kind = line.split()
        values, _, _ = decode_raw(payload, int(offset))
        shape = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
        params[name] = Node(values.reshape(shape), requires_grad=kind == "param")
    logger.info("loaded %d tensors from %s", len(params), path)
    return Checkpoint(params, sections)
