"""Half fine-tuning on a numpy toy transformer.

Each training round freezes a freshly drawn half of the transformer-layer
matrices and updates the rest, which limits how far a sequence of tasks can
drag the model from what it already knew.
"""

__version__ = "0.1.0"
