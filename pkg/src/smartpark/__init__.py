"""Smart parking platform: reservation engine, durable event log, edge
device protocol, lot simulator, HTTP API and operator CLI."""

__version__ = "0.1.0"

from .engine import ParkingEngine
from .model import Tariff

__all__ = ["ParkingEngine", "Tariff", "__version__"]
