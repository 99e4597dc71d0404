"""eegmatch: EEG-to-text-prompt matching at desk scale.

Synthesizes band-structured EEG, featurizes it into 4-D spatial-spectral-
temporal tensors (differential entropy + band power on an electrode grid),
encodes with a small vision-transformer variant built on an in-repo autodiff
substrate, and matches embeddings against a frozen text prompt bank by cosine
similarity.  Includes LOSO / cross-time / N-shot / ablation evaluation
protocols and a CLI that emits deterministic manifests, CSVs, and SVG charts.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
