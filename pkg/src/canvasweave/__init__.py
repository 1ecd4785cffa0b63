"""Fabric-type similarity for canvas X-ray images with a Siamese texture encoder."""

__version__ = "0.1.0"
