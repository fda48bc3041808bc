"""Width-switchable contrastive pre-training at desk scale.

A slimmable backbone shares one set of full-width weights across several
nested sub-networks. Pre-training uses a momentum-encoder contrastive
objective with three interference remedies (slow start, online
distillation, loss reweighting), gradient diagnostics, and a closed-form
least-squares verifier for the shared-linear-probe optimality condition.
"""

from slimcontrast.slimnet import WidthConfig, active_channels

__all__ = ["WidthConfig", "active_channels"]
__version__ = "0.1.0"
