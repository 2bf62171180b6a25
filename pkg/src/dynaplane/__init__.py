"""Dynamic neural SDF scenes on factorized 2D feature planes.

A 4D spatio-temporal field is stored as nine learnable feature planes at
two scales, rendered as a signed-distance field with logistic-CDF opacities,
and trained from posed images (multi-view) or a single moving camera
(monocular flow + canonical field).  Heavy submodules import numpy, so this
package root stays import-light; use the submodules directly:

    dynaplane.planes    plane storage, bilinear queries, TV regularizer
    dynaplane.mlp       positional encoding + dense heads (explicit grads)
    dynaplane.render    rays, opacity, compositing, eikonal penalty
    dynaplane.models    multi-view and monocular wirings + losses
    dynaplane.train     Adam loop, coarse-to-fine schedule
    dynaplane.scenes    analytic scene oracle, rigs, dataset files
    dynaplane.metrics   PSNR / SSIM / evaluation
    dynaplane.cli       `dynaplane` command-line tool
"""

__version__ = "0.1.0"
