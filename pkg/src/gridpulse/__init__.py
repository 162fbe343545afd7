"""gridpulse: PMU stream monitoring and compressed archival queries."""

__version__ = "0.1.0"
