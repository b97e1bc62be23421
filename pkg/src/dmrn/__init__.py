"""Twin-branch multi-scale contrastive embedding network with an SVM head.

The package is CPU-only and numpy-backed: a small reverse-mode autodiff
core (`dmrn.tensor`), a miniature residual backbone with per-stage
pooling units (`dmrn.backbone`, `dmrn.rpu`, `dmrn.model`), pairwise
contrastive training (`dmrn.contrastive`, `dmrn.pairing`,
`dmrn.trainer`), a linear SVM head with study-level probability
averaging (`dmrn.classifier`), cross-validation and metrics
(`dmrn.evalkit`), a synthetic dataset generator (`dmrn.synthdata`) and
a CLI (`dmrn.cli`).
"""

__version__ = "0.1.0"
