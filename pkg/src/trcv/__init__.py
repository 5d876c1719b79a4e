"""Weakly supervised video object localization with sampled pseudo-pixels.

Modules: ``ingestion`` (manifests, synthetic videos), ``saliency``
(providers), ``pseudolabel`` (Otsu pools and sampling), ``model`` (ViT
encoder with classification and localization heads), ``losses``,
``training``, ``evaluation`` (boxes, CorLoc, reports) and ``cli``.
"""

__version__ = "0.1.0"
