"""Sample what you can't compress: a desk-scale diffusion-loss autoencoder.

A continuous encoder and a two-part decoder (deterministic initial
decoder + conditional denoising refiner) trained jointly under a
composite diffusion / MSE / perceptual objective, next to a patch-GAN
autoencoder baseline, with rate-distortion and sampling sweeps on
procedural toy textures.  Everything runs on a small NumPy-backed
reverse-mode tensor engine with fully seeded randomness.
"""

__version__ = "0.1.0"
