"""Feature-selected graph spatial attention network (FGSAN).

A graph attention encoder with learnable shortest-path-distance biases, a
relaxed-Bernoulli feature selector over brain regions, and a binary MLP
classifier, trained jointly on dynamic functional-connectivity graphs.

Heavy submodules are imported lazily; ``import fgsan`` alone stays cheap so
entry points can configure the environment (thread caps) before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "numcore",
    "graphdata",
    "synth",
    "attention",
    "selector",
    "classifier",
    "pipeline",
    "train",
    "cli",
]
