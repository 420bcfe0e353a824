"""Sentinel: synthesize labeled traffic, tokenize packets as sentences, train a
small transformer classifier, and judge per-packet threat level."""

__version__ = "0.1.0"

CLASS_NAMES = ("benign", "volumetric", "protocol", "vulnerability")
CLASS_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}
