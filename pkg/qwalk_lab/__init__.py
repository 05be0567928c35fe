"""Virtual lab for two-photon quantum walks in a multimode fiber."""

__version__ = "0.1.0"
