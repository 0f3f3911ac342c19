"""Desk-scale hierarchical multilingual ASR with a staged conformer encoder."""

__version__ = "0.1.0"
