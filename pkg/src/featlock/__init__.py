"""Key-based access control for a toy object detector: keyed channel
permutation of feature maps and block-wise pixel shuffling of inputs."""

__version__ = "0.1.0"
