"""Data pruning for small flow-matching diffusion models.

Modules: ``datasets`` (data, manifests), ``diffusion`` (velocity MLP,
training, ODE sampling), ``pruning`` (scores, clustering, selection),
``metrics`` (FID, precision/recall, Vendi, IS, memorization) and ``runner``
(sweeps, curves).
"""

__version__ = "0.1.0"
