"""Cascaded residual-UNet segmentation of prostate zones.

Two stacked 2D segmentation networks: the first delineates the whole
prostate on axial slices, the second delineates the central gland inside
that mask, and the peripheral zone falls out by exclusion.  Everything
downstream of numpy is implemented here: the tensor ops with analytic
gradients, the optimiser, the volume file format, the phantom generator,
the training loop, and the agreement statistics.
"""

__version__ = "0.1.0"
