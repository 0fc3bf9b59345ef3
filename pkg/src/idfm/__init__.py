"""Instance-disentangled attention masks for flow-matching image editing,
with a small numpy MMDiT, a synthetic text-editing benchmark and metrics."""

__version__ = "0.1.0"
