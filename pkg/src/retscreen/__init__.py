"""Desk-scale retinal screening pipeline.

Small convolutional networks trained with an alternating most-pathological-
image selection scheme, assembled by greedy forward ensembling, documented
by input-gradient heatmaps, and evaluated with ROC/AUC statistics including
DeLong confidence intervals and an exact t-SNE cohort embedding.
"""

__version__ = "0.1.0"
