"""Few-shot image recognition with a key-value support memory and a
contextual learner that predicts part of the query network per episode."""

__version__ = "0.1.0"
