"""anodet3d: unsupervised anomaly detection on 3D scalar volumes.

Adversarially trained reconstruction (critic-regularized generator plus an
encoder for latent inversion), anomaly scoring with voxel-wise residual
localization, ROC/PR evaluation, and a synthetic phantom generator so the
whole pipeline runs end to end without clinical data.
"""

__version__ = "0.1.0"
