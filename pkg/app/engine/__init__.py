"""Engine modules: the per-slide pipeline and grading orchestration."""
