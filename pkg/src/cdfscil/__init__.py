"""Desk-scale laboratory for cross-domain few-shot class-incremental learning.

Submodules: ``datasets`` (data types, on-disk format, synthetic generator,
session splitting), ``augment`` (standard and pseudo-class augmentation),
``network`` (embedding networks with analytic backward), ``losses``
(cosine-margin objectives), ``protocol`` (incremental state machine and
metrics), ``gradcheck`` (finite-difference oracles), ``config``/``plots``/
``cli`` (experiment front door).

Kept import-light on purpose: the CLI pins BLAS thread environment variables
before numpy loads.
"""

__version__ = "0.1.0"
