"""The domain services and the wiring that assembles them into a testbed."""

from .system import AirSystem, Snapshot, SystemConfig

__all__ = ["AirSystem", "Snapshot", "SystemConfig"]
