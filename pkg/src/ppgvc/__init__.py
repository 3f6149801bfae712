"""PPG-based voice conversion (conditional VAE + GAN decoder), silence post-processing and EER tools."""

__version__ = "0.1.0"
