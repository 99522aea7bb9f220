from __future__ import annotations

import json
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import ModelFileError
from .tensor_nn import LayerSpec, Network

if TYPE_CHECKING:
    from typing import TypeAlias

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

#
# constants
#

MODEL_FILE_VERSION = 1
SNAPSHOT_VERSION   = 1

KEY_VERSION    = "version"
KEY_SEED       = "seed"
KEY_LAYERS     = "layers"
KEY_PARAMETERS = "parameters"
KEY_METADATA   = "metadata"

KEY_TENSOR_SHAPE = "shape"
KEY_TENSOR_DATA  = "data"


def tensor_to_json(tensor: NDArray) -> dict[str, Any]:
    # tolist() yields python floats, and json writes their shortest round-trip repr
    arr = np.ascontiguousarray(tensor, dtype = np.float64)
    return {KEY_TENSOR_SHAPE: list(arr.shape), KEY_TENSOR_DATA: arr.reshape(-1).tolist()}


def tensor_from_json(doc: Any, what: str) -> NDArray:
    try:
        shape = tuple(int(d) for d in doc[KEY_TENSOR_SHAPE])
        data  = np.asarray(doc[KEY_TENSOR_DATA], dtype = np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"{what}: malformed tensor ({e})") from e
    if data.ndim != 1 or data.size != int(np.prod(shape, dtype = np.int64)):
        raise ModelFileError(f"{what}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


class ModelFileWriter:
    """Accumulates a network description and writes it as one JSON document."""

    path: Path
    doc: dict[str, Any]

    def __init__(self, path: os.PathLike[str] | str):
        self.path = Path(path)
        self.doc  = {KEY_VERSION: MODEL_FILE_VERSION, KEY_SEED: 0, KEY_LAYERS: [], KEY_PARAMETERS: [], KEY_METADATA: {}}

    def add_seed(self, seed: int) -> None:
        self.doc[KEY_SEED] = int(seed)

    def add_layer(self, spec: LayerSpec) -> None:
        self.doc[KEY_LAYERS].append(spec.to_dict())

    def add_tensor(self, tensor: NDArray) -> None:
        self.doc[KEY_PARAMETERS].append(tensor_to_json(tensor))

    def add_metadata(self, key: str, value: Any) -> None:
        self.doc[KEY_METADATA][key] = value

    def add_network(self, network: Network) -> None:
        self.add_seed(network.seed)
        for spec in network.specs:
            self.add_layer(spec)
        for tensor in network.parameters():
            self.add_tensor(tensor)

    def write_to_file(self) -> None:
        self.path.parent.mkdir(parents = True, exist_ok = True)
        try:
            with open(self.path, "w") as fout:
                json.dump(self.doc, fout, allow_nan = False)
                fout.write("\n")
        except ValueError as e:
            raise ModelFileError(f"{self.path}: cannot serialise non-finite values") from e


def save_network(network: Network, path: os.PathLike[str] | str, metadata: dict[str, Any] | None = None) -> None:
    writer = ModelFileWriter(path)
    writer.add_network(network)
    for key, value in (metadata or {}).items():
        writer.add_metadata(key, value)
    writer.write_to_file()


def read_json(path: os.PathLike[str] | str) -> Any:
    try:
        with open(path) as fp:
            return json.load(fp)
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{path}: invalid JSON ({e})") from e


def network_from_dict(doc: Any, what: str = "model") -> Network:
    if not isinstance(doc, dict):
        raise ModelFileError(f"{what}: expected a JSON object")
    version = doc.get(KEY_VERSION)
    if version != MODEL_FILE_VERSION:
        raise ModelFileError(f"{what}: unsupported model file version {version!r}")
    try:
        specs = [LayerSpec.from_dict(layer) for layer in doc[KEY_LAYERS]]
        seed  = int(doc.get(KEY_SEED, 0))
        network = Network(specs, seed, initialize = False)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"{what}: bad layer description ({e})") from e
    tensors = [tensor_from_json(t, f"{what} parameter {i}") for i, t in enumerate(doc.get(KEY_PARAMETERS, []))]
    try:
        network.set_parameters(tensors)
    except ValueError as e:
        raise ModelFileError(f"{what}: {e}") from e
    return network


def load_network(path: os.PathLike[str] | str) -> tuple[Network, dict[str, Any]]:
    """Returns the network and the free-form metadata stored with it."""
    doc = read_json(path)
    network = network_from_dict(doc, str(path))
    return network, dict(doc.get(KEY_METADATA, {}))
