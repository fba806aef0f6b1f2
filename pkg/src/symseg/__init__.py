"""Algorithm selection and iterative high-level verification for symbolic segmentation."""

__version__ = "0.1.0"
