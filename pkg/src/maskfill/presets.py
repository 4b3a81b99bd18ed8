"""Named denoising presets.

synthetic-* assume spatially independent noise: low mask ratio, per-channel
masks, no downsampling. real-* target spatially correlated camera noise: high
mask ratio, one mask shared across channels, pixel-shuffle factor 2.
"""

PRESETS = {
    "synthetic-default": dict(mask_ratio=0.3, beta=0.99, iters=1000, pd_factor=1,
                              shared_channels=False),
    "synthetic-faster": dict(mask_ratio=0.3, beta=0.9, iters=200, pd_factor=1,
                             shared_channels=False),
    "real-default": dict(mask_ratio=0.85, beta=0.99, iters=1000, pd_factor=2,
                         shared_channels=True),
    "real-sidd": dict(mask_ratio=0.9, beta=0.99, iters=800, pd_factor=2,
                      shared_channels=True),
}
