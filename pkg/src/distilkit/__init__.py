"""distilkit: teacher-student distillation toolkit.

Compresses neural ensembles into small networks, distils MCMC posterior
chains into compact predictive distributions, and distils unnormalizable
generative models (RBM) into tractable ones (NADE), including partition
function estimation from the distilled model.
"""

__version__ = "0.1.0"
