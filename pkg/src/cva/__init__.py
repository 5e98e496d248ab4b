"""Overlap-aligned self-supervised pretraining for 3-D volumes, at toy scale.

Modules:

- ``tensor``, ``gradcheck``: reverse-mode autodiff over numpy and a finite-difference oracle
- ``volume``: volumes, synthetic blob data, raw+JSON I/O
- ``views``: overlap-constrained crop pairs and augmentations
- ``nets``: conv and token encoders, heads, pixel decoder, checkpoints
- ``losses``: ROIAlign and the loss family
- ``train``: student-teacher loop, EMA, probe
- ``ranking``: benchmark rank aggregation
- ``config``, ``cli``: run configuration and command line
"""

__version__ = "0.1.0"
