"""Twin-tower contrastive sentence embeddings with tensor-modulus constraints."""

__version__ = "0.1.0"
