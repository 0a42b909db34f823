"""Graph-RAG compliance checking of software requirements."""

__version__ = "0.1.0"
