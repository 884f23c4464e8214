"""Non-contrastive clustering on the unit hypersphere.

Online/target encoder pair with a predictor head, trained by an augmented
instance-alignment loss plus a prototype contrastive term, with spherical
k-means E-steps supplying pseudo-labels.
"""

__version__ = "0.1.0"
