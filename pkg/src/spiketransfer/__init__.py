"""Toolkit for training spiking networks on scarce event-camera data with
help from static images: event processing, CKA-based feature alignment,
learnable per-timestep mixing, and a sliding input-replacement schedule."""

__version__ = "0.1.0"
