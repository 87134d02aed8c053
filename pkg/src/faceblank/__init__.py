"""Face erasing toolkit: blank-face data synthesis, three-stage inpainting
GAN training, end-to-end erasing, and AR part effects."""

__version__ = "0.1.0"
