"""Function-level clone detection for C/C++ corpora.

Pipeline: extract fragments, embed them with one or more providers, run
cosine k-NN search, filter by threshold/topN, canonicalize candidate pairs,
optionally merge providers by deduplicated union, and score against a gold
standard.
"""

__version__ = "0.1.0"
