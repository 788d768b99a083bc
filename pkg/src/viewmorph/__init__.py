"""Identity-preserving viewpoint transformation networks on a from-scratch autodiff core."""

__version__ = "0.1.0"
