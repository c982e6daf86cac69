"""Exemplar-based contrastive self-supervised learning on numpy.

Modules: ``diffcore`` (reverse-mode autodiff), ``encoder``, ``contrastive``,
``support_set``, ``data``, ``pipelines``, ``cil``, ``evaluation``, ``cli``.
"""
__version__ = "0.1.0"
