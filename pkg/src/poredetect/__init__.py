"""Cross-sensor fingerprint pore detection with domain-adversarial training."""

__version__ = "0.1.0"
