"""IoT device fingerprinting from TCP session payloads."""

__version__ = "0.1.0"
