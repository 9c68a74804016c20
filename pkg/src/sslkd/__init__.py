"""Knowledge distillation of self-supervised speech encoders, at desk scale.

Subpackages and modules:

* :mod:`sslkd.autodiff` - reverse-mode automatic differentiation on numpy arrays
* :mod:`sslkd.features` - log-mel, MFCC and the two learnable front-ends
* :mod:`sslkd.encoder` - transformer encoder, configs and parameter counting
* :mod:`sslkd.labels` - K-Means pseudo-labels
* :mod:`sslkd.losses` - pretraining and distillation objectives
* :mod:`sslkd.train` - teacher pretraining, two-stage distillation, Adam
* :mod:`sslkd.analysis` - CCA similarity and front-end benchmarks
* :mod:`sslkd.cli` - the ``sslkd`` command
"""
__version__ = "0.1.0"
