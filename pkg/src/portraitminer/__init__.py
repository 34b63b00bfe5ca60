"""portraitminer: batch mining of historical trends in portrait corpora."""

__version__ = "0.1.0"
