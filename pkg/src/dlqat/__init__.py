"""Weight-decomposed low-rank quantization-aware training on a small numpy autodiff."""

__version__ = "0.1.0"
