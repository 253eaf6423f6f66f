"""Bundled example feeders (schema documented in the repository README)."""

from importlib import resources


def _feeder_path(name):
    return resources.files(__package__) / "feeders" / name


def tutorial_feeder_path():
    """6-bus walkthrough feeder."""
    return _feeder_path("tutorial_6bus.json")


def test_feeder_path():
    """~150 single-phase-node synthetic test feeder (3 PV plants, 2 regulators)."""
    return _feeder_path("test_feeder_150.json")


def regenerate():
    """Rebuild the bundled feeder files from the synth builders."""
    from .. import synth
    from ..feeder import save_feeder

    save_feeder(synth.build_tutorial_feeder(), _feeder_path("tutorial_6bus.json"))
    save_feeder(synth.build_test_feeder(), _feeder_path("test_feeder_150.json"))
