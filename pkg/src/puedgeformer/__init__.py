"""Point-cloud upsampling with EdgeConv-projected self-attention, on a small numpy autodiff core."""

__version__ = "0.1.0"
