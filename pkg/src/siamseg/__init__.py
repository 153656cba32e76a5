"""SiamSeg - self-training domain adaptation with a Siamese contrastive branch."""

__version__ = "0.1.0"
