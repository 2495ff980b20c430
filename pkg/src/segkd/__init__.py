"""Task-specific distillation of segmentation foundation teachers into compact students.

The package covers the full desk-scale experiment loop: dataset ingestion and
label budgeting, a ViT teacher/student pair, LoRA teacher adaptation,
dual-level distillation losses, SSL baselines (MoCo, MAE), a small diffusion
generator for synthetic transfer sets, segmentation metrics with brute-force
oracles, and a CLI that ties the pipelines into reproducible experiments.
"""

__version__ = "0.1.0"
