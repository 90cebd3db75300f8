"""Prostate whole-slide analysis: stain decomposition, tumor masking, patch grading and pattern detectors."""
