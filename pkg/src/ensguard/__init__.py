"""Bit-flip tolerant ensemble inference: relation-guarded model sets, fault
injection, baseline protection strategies and a deadline simulator."""

__version__ = "0.1.0"
