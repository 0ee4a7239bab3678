"""volgauss: volumetric Gaussian-mixture rendering with closed-form
per-primitive transmittance, an EWA splatting baseline, hand-derived
gradients, scene fitting, and Beer-Lambert tomography."""

from .camera import Camera, look_at
from .core import (Gaussian3D, Ray, RayGaussian1D, analytic_alpha,
                   covariance, covariance_inverse, density_kappa,
                   project_to_ray, theta_for_kappa, transmittance,
                   transmittance_finite)
from .grad import LossSpec, SceneGrads, backward, fd_check, loss_and_grad
from .metrics import mse, psnr, psnr_volume, ssim, ssim_volume
from .optim import (Adam, DivergenceError, FitReport, TrainConfig, fit_image,
                    load_checkpoint, save_checkpoint)
from .oracle import (MarchConfig, exact_sorted_composite, exact_sorted_image,
                     mixture_field, raymarch, raymarch_image)
from .raster import RenderOutput, Scene, composite_pixel, render
from .tomo import (DensityGrid, Phantom, Projection, TomoGeometry,
                   make_phantom_projections, reconstruct, tomo_backward,
                   tomo_forward, voxelize)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Camera", "DensityGrid", "DivergenceError", "FitReport",
    "Gaussian3D", "LossSpec", "MarchConfig", "Phantom", "Projection", "Ray",
    "RayGaussian1D", "RenderOutput", "Scene", "SceneGrads", "TomoGeometry",
    "TrainConfig", "analytic_alpha", "backward", "composite_pixel",
    "covariance", "covariance_inverse", "density_kappa", "exact_sorted_composite",
    "exact_sorted_image", "fd_check", "fit_image", "load_checkpoint",
    "look_at", "loss_and_grad", "make_phantom_projections", "mixture_field",
    "mse", "project_to_ray", "psnr", "psnr_volume", "raymarch",
    "raymarch_image", "reconstruct", "render", "save_checkpoint", "ssim",
    "ssim_volume", "theta_for_kappa", "tomo_backward", "tomo_forward",
    "transmittance", "transmittance_finite", "voxelize",
]
