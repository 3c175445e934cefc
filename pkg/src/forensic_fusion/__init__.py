"""Reliability-aware fusion of image-forensics experts with a content-level analyzer."""

from .core import Basis, DatasetManifest, FeatureVector, Label, Sample, Verdict, f1_acc

__all__ = ["Basis", "DatasetManifest", "FeatureVector", "Label", "Sample", "Verdict", "f1_acc"]
__version__ = "0.1.0"
