"""Sampled function-norm regularization for ReLU networks.

Modules: ``autodiff`` (reverse-mode tape), ``network`` (MLPs),
``regularizers`` (penalties), ``samplers`` (sampling distributions),
``bound`` (generalization bound), ``sat_reduction`` (3-SAT to ReLU nets),
``kernel_logreg`` (kernel logistic regression), ``lbfgs``, ``gradcheck``
and ``harness`` (experiments and CSV output).
"""

__version__ = "0.1.0"
