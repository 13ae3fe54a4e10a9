"""Framework-free 1D-convolutional handwritten text line recognition.

Modules:
- numerics: differentiable primitives with hand-written VJPs
- layers: conv blocks, squeeze-and-excitation, residual merge
- model: config, parameter allocation, forward/backward
- ctc: CTC loss, brute-force oracle, greedy decoding
- augment: tiling-and-corruption augmentation
- data: manifests, vocabulary, preprocessing, batching
- train: Adam, early stopping, checkpoints
- evaluate: character error rate
"""

__version__ = "0.1.0"
