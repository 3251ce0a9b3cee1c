"""Quantify how much raw-byte malware detectors rely on spurious PE regions."""

__version__ = "0.1.0"
