"""Zero-shot semantic segmentation on synthetic scenes, driven by feature
synthesis: a contextual latent code conditions a generator that fakes
pixel and patch features for categories never seen in training, and the
classifier is finetuned on the fakes."""

__version__ = "0.1.0"
