"""Context-aware semantic matching at desk scale.

Modules: ``tensor`` (reverse-mode autodiff), ``msconv`` (multi-scale
convolution), ``encoder`` (metric-learned features), ``miner``
(correspondence mining by sparse graph matching), ``flownet`` (affine plus
flow alignment with a segmentation head), ``evaluation`` (metrics) and
``cli``.
"""

__version__ = "0.1.0"
