"""protoground: prototype-bank visual grounding at desk scale."""

__version__ = "0.1.0"
