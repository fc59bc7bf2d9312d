"""lorapack - Mixed-precision post-training quantization of low-rank adapters."""

__version__ = "0.1.0"

# Bumped whenever the .lqz layout changes.
FORMAT_VERSION = "2"
