"""biascite

Bias-aware citation prediction for newly published papers: agent-based feature extraction,
a heterogeneous graph encoder, an exposure-shielded two-stage predictor, GroupDRO training
over venue-tier environments and counterfactual regularization of the actionable factors.
"""
__title__ = "biascite"
__version__ = "0.1.0"
__license__ = "MIT"
__summary__ = "Bias-aware citation prediction with exposure shielding and GroupDRO"
__url__ = "https://github.com/biascite/biascite/"
__authors__ = ["biascite contributors"]


__all__ = [
    "__title__",
    "__version__",
    "__license__",
    "__summary__",
    "__url__",
    "__authors__",
]
