"""pairdis: rare-event detection on image pairs via disentangled twin-VAE features.

Phase one learns common/specific Gaussian posteriors from negative pairs only;
phase two fine-tunes a small classifier on the common means under severe class
imbalance. Everything runs on a minimal deterministic numpy tensor engine.
"""

__version__ = "0.1.0"
