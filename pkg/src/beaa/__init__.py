"""Batch-oriented element-wise approximate activation for encrypted CNN inference.

Subpackages and modules:

- ``beaa.he``: leveled CKKS backend and exact simulation backend
- ``beaa.packing``: element-wise and channel-wise slot packing
- ``beaa.activation``: trainable degree-2 polynomial activations
- ``beaa.model``: layers, the optimized SqueezeNet and model files
- ``beaa.training``: backprop training, Nesterov updates, distillation
- ``beaa.inference``: compiling and executing networks on ciphertexts
- ``beaa.benchmark``: cost model and batch-size benchmark
- ``beaa.data`` and ``beaa.cli``: datasets and the command line
"""

__version__ = "0.1.0"
