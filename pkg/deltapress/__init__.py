"""Delta compression of fine-tuned checkpoints: sign quantization plus low-rank residuals."""

__version__ = "0.1.0"
