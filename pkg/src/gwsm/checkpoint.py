"""Binary checkpoints: magic 'GWSM', version, config snapshot, parameters.

Layout (all integers little-endian u32):
  magic 4 bytes | version | config-block length | config text (key = value
  lines, utf-8) | parameter count | records.
Each record: name length | name utf-8 | ndim | dims | raw float64 LE data.
Round-trips are bit-exact; a version mismatch is rejected.
"""

from __future__ import annotations

import dataclasses
import os
import struct

import numpy as np

from .backbone import BackboneParams
from .errors import DataError
from .gnn import GnnParams
from .tensor import Tensor
from .training import TrainConfig, init_model

MAGIC = b"GWSM"
VERSION = 1

# the config file key for the loss-balance weight is "lambda"; the dataclass
# field avoids the keyword
_FIELD_TO_KEY = {"lam": "lambda"}
_KEY_TO_FIELD = {v: k for k, v in _FIELD_TO_KEY.items()}


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}\n")
    return "".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise DataError(f"{source}:{lineno}: empty key or value")
        items[key] = value
    return items


def config_from_items(items: dict[str, str],
                      base: TrainConfig | None = None) -> TrainConfig:
    """Coerce string values by field type and overlay them on ``base``."""
    base = base or TrainConfig()
    values = base.as_dict()
    types = {f.name: type(getattr(base, f.name))
             for f in dataclasses.fields(base)}
    for key, raw in items.items():
        name = _KEY_TO_FIELD.get(key, key)
        if name not in values:
            raise DataError(f"unknown config key {key!r}")
        t = types[name]
        try:
            if t is bool:
                low = raw.lower()
                if low in ("true", "1"):
                    values[name] = True
                elif low in ("false", "0"):
                    values[name] = False
                else:
                    raise ValueError(f"not a boolean: {raw!r}")
            else:
                values[name] = t(raw)
        except ValueError as exc:
            raise DataError(f"config key {key!r}: {exc}") from exc
    return TrainConfig(**values)


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read_u32(fh, path) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError(f"{path}: truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def save_checkpoint(path: str | os.PathLike, config: TrainConfig,
                    named_params: list[tuple[str, Tensor]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION)
        block = config_to_text(config).encode("utf-8")
        _write_u32(fh, len(block))
        fh.write(block)
        _write_u32(fh, len(named_params))
        for name, tensor in named_params:
            encoded = name.encode("utf-8")
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            _write_u32(fh, tensor.data.ndim)
            for dim in tensor.data.shape:
                _write_u32(fh, dim)
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike
                    ) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version = _read_u32(fh, path)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version} "
                            f"(expected {VERSION})")
        block_len = _read_u32(fh, path)
        block = fh.read(block_len)
        if len(block) != block_len:
            raise DataError(f"{path}: truncated config block")
        items = parse_config_text(block.decode("utf-8"), source=str(path))
        config = config_from_items(items)
        count = _read_u32(fh, path)
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u32(fh, path)
            name = fh.read(name_len).decode("utf-8")
            ndim = _read_u32(fh, path)
            shape = tuple(_read_u32(fh, path) for _ in range(ndim))
            nbytes = 8 * int(np.prod(shape)) if shape else 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise DataError(f"{path}: truncated data for {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return config, params


def restore_model(path: str | os.PathLike
                  ) -> tuple[TrainConfig, BackboneParams, GnnParams]:
    """Rebuild parameter structures from a checkpoint, bit-exact."""
    config, arrays = load_checkpoint(path)
    backbone, gnn_params = init_model(config)
    named = dict(backbone.named_parameters() + gnn_params.named_parameters())
    if set(named) != set(arrays):
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        raise DataError(f"{path}: parameter names disagree "
                        f"(missing={sorted(missing)}, extra={sorted(extra)})")
    for name, tensor in named.items():
        if tensor.data.shape != arrays[name].shape:
            raise DataError(f"{path}: shape mismatch for {name!r}: "
                            f"{arrays[name].shape} vs {tensor.data.shape}")
        tensor.data = arrays[name]
    return config, backbone, gnn_params
