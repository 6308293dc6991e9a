"""Probability-sorted selective-scan segmentation on synthetic imbalanced data."""

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "tape_scope", "__version__"]


def __getattr__(name):
    # lazy so the CLI can pin BLAS threads before numpy loads
    if name in ("Tensor", "no_grad", "tape_scope"):
        from . import autodiff

        return getattr(autodiff, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
