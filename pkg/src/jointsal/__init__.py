"""Joint saliency detection and weakly supervised segmentation toolkit."""

__version__ = "0.1.0"

# Keep this module import-light: the CLI must be able to configure BLAS
# thread limits from the environment before numpy is first imported.
