"""Gradient alignment between a classifier and interpretable image features.

Modules: ``diffcore`` (reverse-mode autodiff), ``model`` (the CNN),
``features`` (moment features), ``geometry`` (S, flow and F), ``training``,
``synthdata``, ``analysis`` and ``cli``.
"""

__version__ = "0.1.0"
