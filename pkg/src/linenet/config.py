"""Line-network description shared by every analysis in the package.

A network with ``hops = h`` links has nodes ``v_0 .. v_h``.  Link ``i``
(1-based) carries packets from ``v_{i-1}`` to ``v_i`` and erases each one
independently with probability ``erasures[i-1]``.  The ``h - 1``
intermediate nodes ``v_1 .. v_{h-1}`` have finite buffers; the source and
destination are unbounded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence, Union


class ConfigError(ValueError):
    """Raised when a network description violates one of its invariants."""


@dataclass(frozen=True)
class NetworkConfig:
    """Immutable description of a finite-buffer line network.

    Parameters
    ----------
    hops : int
        Number of links ``h >= 2``.
    erasures : tuple of float
        Erasure probability of each link, length ``h``.
    buffers : tuple of int
        Buffer capacity (packets) of each intermediate node, length ``h - 1``.
    packet_size_bytes : int or None
        Carried along for bookkeeping only.
    """

    hops: int
    erasures: tuple[float, ...]
    buffers: tuple[int, ...]
    packet_size_bytes: int | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "erasures", tuple(float(e) for e in self.erasures))
        object.__setattr__(self, "buffers", tuple(_as_int(b, "buffer") for b in self.buffers))

    @classmethod
    def uniform(cls, hops: int, erasure: float, buffer: int, packet_size_bytes: int | None = None) -> "NetworkConfig":
        """Network with the same erasure on every link and the same buffer at every node."""
        return validate(cls(hops, (erasure,) * hops, (buffer,) * (hops - 1), packet_size_bytes))

    @property
    def n_nodes(self) -> int:
        """Number of intermediate (buffered) nodes."""
        return self.hops - 1

    def replace(self, **changes) -> "NetworkConfig":
        data = self.to_dict()
        data.update(changes)
        return validate(from_dict(data))

    def with_buffer(self, node: int, size: int) -> "NetworkConfig":
        """Copy with intermediate node ``node`` (1-based) resized to ``size``."""
        buffers = list(self.buffers)
        buffers[node - 1] = size
        return self.replace(buffers=buffers)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "hops": self.hops,
            "erasures": list(self.erasures),
            "buffers": list(self.buffers),
        }
        if self.packet_size_bytes is not None:
            out["packet_size_bytes"] = self.packet_size_bytes
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


ConfigLike = Union[NetworkConfig, Mapping[str, Any]]


def _as_int(value, what: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{what} must be an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{what} must be an integer, got {value!r}")
        return int(value)
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be an integer, got {value!r}") from None


def validate(config: NetworkConfig) -> NetworkConfig:
    """Return ``config`` unchanged if it is a legal line network.

    Checks are made in a fixed order and the first failure is reported:
    hop count, vector lengths, erasure range, buffer sizes, packet size.
    """
    h = config.hops
    if not isinstance(h, int) or isinstance(h, bool) or h < 2:
        raise ConfigError(f"hops must be an integer >= 2, got {h!r}")
    if len(config.erasures) != h:
        raise ConfigError(f"length mismatch: expected {h} erasures, got {len(config.erasures)}")
    if len(config.buffers) != h - 1:
        raise ConfigError(f"length mismatch: expected {h - 1} buffers, got {len(config.buffers)}")
    for i, eps in enumerate(config.erasures, start=1):
        if not (0.0 <= eps <= 1.0) or math.isnan(eps):
            raise ConfigError(f"erasure out of range: link {i} has {eps!r}")
    for i, m in enumerate(config.buffers, start=1):
        if m < 1:
            raise ConfigError(f"buffer of node {i} must be >= 1, got {m}")
    s = config.packet_size_bytes
    if s is not None and (not isinstance(s, int) or isinstance(s, bool) or s < 1):
        raise ConfigError(f"packet_size_bytes must be a positive integer, got {s!r}")
    return config


def from_dict(data: Mapping[str, Any]) -> NetworkConfig:
    try:
        hops = data["hops"]
        erasures = data["erasures"]
        buffers = data["buffers"]
    except KeyError as exc:
        raise ConfigError(f"missing key {exc.args[0]!r}") from None
    hops = _as_int(hops, "hops")
    if isinstance(erasures, (int, float)):
        erasures = [erasures] * hops
    if isinstance(buffers, (int, float)):
        buffers = [buffers] * (hops - 1)
    return NetworkConfig(
        hops=hops,
        erasures=tuple(erasures),
        buffers=tuple(buffers),
        packet_size_bytes=data.get("packet_size_bytes"),
    )


def check_config(config: ConfigLike) -> NetworkConfig:
    """Coerce a config-like input (dataclass or mapping) and validate it."""
    if isinstance(config, NetworkConfig):
        return validate(config)
    if isinstance(config, Mapping):
        return validate(from_dict(config))
    raise TypeError(f"expected NetworkConfig or mapping, got {type(config).__name__}")


def loads(text: str) -> NetworkConfig:
    return check_config(json.loads(text))


def load(path: Union[str, Path]) -> NetworkConfig:
    return loads(Path(path).read_text())


def dump(config: NetworkConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config.to_json(indent=2) + "\n")


def state_count(config: NetworkConfig) -> int:
    """Size of the joint buffer-state space, ``prod(m_i + 1)``."""
    return math.prod(m + 1 for m in config.buffers)


def expand(values: Union[float, Sequence[float]], length: int) -> list:
    """Broadcast a scalar to ``length`` entries; pass sequences through."""
    if isinstance(values, (int, float)):
        return [values] * length
    return list(values)
