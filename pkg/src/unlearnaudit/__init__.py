"""Membership-inference auditing of approximate machine unlearning.

Modules: ``data``, ``model``, ``unlearn``, ``attack``, ``risk``, ``audit``,
``pipeline`` and the ``cli`` entry point.
"""
from .backend import NAME as BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
