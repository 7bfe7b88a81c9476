"""Multi-view entity retrieval.

Entity descriptions are segmented into sentence-level views; a small
trainable dual encoder maps mentions and views into one vector space; a
heuristic distant-pair merging search enriches each entity's view set; and
retrieval is an exact top-k scan over cached view vectors, scored by each
entity's best view.
"""

__version__ = "0.1.0"
