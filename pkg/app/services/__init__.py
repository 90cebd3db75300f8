"""Service layer: numerics, color and stain math, slide packages, synthesis, masks, nuclei, patterns and the micro-CNN."""
