"""detkit: a modular toolbox for transformer-based object detectors.

Detectors decompose into swappable slots (backbone, encoder, query
initialization, decoder, matcher, loss) that are assembled from lazily
instantiated config trees. A small single-process training engine, a
COCO-style evaluator, and analysis tools (params / FLOPs / FPS / reports)
round out the package.
"""

__version__ = "0.1.0"

from detkit.lazyconf import L, LazySpec, ConfigTree, load_config, apply_overrides, instantiate, dump_config

__all__ = [
    "L",
    "LazySpec",
    "ConfigTree",
    "load_config",
    "apply_overrides",
    "instantiate",
    "dump_config",
]
