"""Multi-resolution VLAD place descriptors.

Builds low-resolution image pyramids, encodes them with a small trainable
convolutional network, aggregates features from all resolutions into one
compact VLAD descriptor through a shared vocabulary, trains the whole stack
with a triplet loss mined from geo-tagged data, and evaluates retrieval
with Recall@N under a metric localization radius.
"""

__version__ = "0.1.0"
