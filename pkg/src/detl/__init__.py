"""Domain-extension transfer learning on a small numpy autograd engine."""

__version__ = "0.1.0"
