"""Toolkit for linear-programming word problems: NER ensembling with a CRF
stacking layer, training-data augmentation, the declaration meaning
representation (parsing, multi-task decomposition, scoring) and a simplex
solver for the resulting programs."""

__version__ = "0.1.0"
