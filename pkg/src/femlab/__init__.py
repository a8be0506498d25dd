"""femlab: energy-model inference over mixed discrete/continuous variables.

Modules: ``ndcore`` (autodiff), ``fem_model`` (energy model, training,
posterior, sampling), ``benchgen`` (synthetic benchmarks and tabular data),
``baselines`` (density and discriminative baselines), ``eval`` (metrics and
experiment runners), ``theory`` (closed-form landscape predictors) and
``cli``.
"""
__version__ = "0.1.0"
