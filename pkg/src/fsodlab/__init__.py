"""Few-shot object detection lab: meta-learning episodic training with
transformation-consistency losses, a synthetic dataset generator, and a
VOC-style evaluation harness."""

__version__ = "0.1.0"
