"""safemail: mail delivery gated by recipient grants, with bodies kept at the sender's provider."""

__version__ = "0.1.0"
