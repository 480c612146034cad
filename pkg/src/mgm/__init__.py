"""Multi-task visual learning with a jointly trained conditional image
generator, on a procedurally generated indoor-scene benchmark."""

__version__ = "0.1.0"
