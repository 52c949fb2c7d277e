"""Contrastive pre-training with dynamic rebalancing and dual reconstruction
for long-tailed object detection, at desk scale."""

__version__ = "0.1.0"
