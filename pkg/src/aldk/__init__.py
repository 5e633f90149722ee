"""Light-weight deformable registration trained with adversarial distillation."""

__version__ = "0.1.0"
