"""Temporal action detection with ESTF adapters and TB-SSM, in numpy.

Subpackages and modules:

* ``numerics``: tensors with a reverse-mode tape, ops, gradient checking, tensor files
* ``ssm``: selective scan, TB-SSM and the attention baseline
* ``estf``: the adapter and a frozen toy video backbone
* ``detector``: pyramid neck, anchor-free head, losses, training loop
* ``postproc``, ``metrics``: soft-NMS, tIoU, AP and mAP
* ``synthdata``: synthetic untrimmed videos with exact boundaries
* ``bench``, ``cli``, ``config``: benchmarks, ablations and the ``estf-tad`` command
"""

__version__ = "0.1.0"
