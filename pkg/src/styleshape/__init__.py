"""Single-image explicit 3D reconstruction with multi-domain style transfer.

The package is organized around a self-contained float64 autodiff core
(`tensor`), a differentiable explicit renderer (`renderer`), trainable
networks (`networks`), the training objective (`losses`), depth evaluation
metrics (`metrics`), a synthetic ground-truth data generator with file I/O
(`synthdata`), the optimization loop (`trainer`), and a batch CLI (`cli`).
"""

__version__ = "0.1.0"
