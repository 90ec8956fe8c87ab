"""Speech-to-text translation from a pretrained speech encoder and text decoder, in numpy."""

__version__ = "0.1.0"
