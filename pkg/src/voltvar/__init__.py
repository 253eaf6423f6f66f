"""Volt-var control toolkit: regression-trained voltage/sensitivity
estimators, critical-node constrained volt-var optimization, and a
quasi-static time-series evaluation harness for radial feeders."""

from .feeder import FeederModel, NodeRef, load_feeder, save_feeder

__version__ = "0.1.0"

__all__ = ["FeederModel", "NodeRef", "load_feeder", "save_feeder", "__version__"]
