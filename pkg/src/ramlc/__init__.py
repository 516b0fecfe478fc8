"""Retrieval-augmented multi-label text classification at desk scale.

Modules: ``numerics`` (tensors and reverse-mode gradients), ``text_data``
(corpora and the synthetic generator), ``encoder`` (phase-one classifier),
``retrieval`` (repository, top-K, label overlap), ``ra_model`` (phase-two
classifier), ``trainer``, ``evaluator``, ``sweep``, ``plotting``,
``checkpoint`` and ``cli``.  Submodules are imported on demand so the
command line can cap thread pools before numpy loads.
"""

__version__ = "0.1.0"
