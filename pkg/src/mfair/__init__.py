"""Geographic and popularity bias measurement and MFAIR re-ranking for recommendation lists."""

__version__ = "0.1.0"
