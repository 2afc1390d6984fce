"""SAR-to-RGB translation with latent diffusion transformers.

Standard (noise-prediction, learned variance) and cold (SAR blend) diffusion,
plus the evaluation harnesses for land-cover classification and cloud removal.
"""

__version__ = "0.1.0"
