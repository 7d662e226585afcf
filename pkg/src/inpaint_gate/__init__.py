"""Quality gate for AI background-inpainted product images.

Two checks run side by side: a trainable reward head scores how well the
generated background suits the product, and a mask-based comparison checks
that the product itself survived the background swap. Dataset tooling,
correlation/filter metrics and a CLI pipeline round out the package.
"""

__version__ = "0.1.0"
