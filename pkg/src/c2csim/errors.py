"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SimError(Exception):
    """Base class for simulator errors."""


class ConfigError(SimError):
    """Invalid or unresolvable configuration."""


class ModelError(SimError):
    """The cost model cannot evaluate the given inputs."""


class CapacityError(SimError):
    """A model does not fit the memory it must live in."""


class OutOfMemory(CapacityError):
    """Weights staged into HBM exceed the target slice capacity."""


class TraceParseError(SimError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno
