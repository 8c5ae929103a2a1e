"""Soil humidity estimation from LoRa uplink signal strength."""

__version__ = "0.1.0"
