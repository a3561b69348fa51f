"""Mass concept erasure on a miniature text-conditioned diffusion model.

The erasure pipeline edits only the cross-attention key/value projections:
a closed-form refinement removes residual concept information carried by
co-existing words, one LoRA pair per concept suppresses the concept's
attention, and a closed-form fusion merges the LoRA pairs into one matrix.
"""
__version__ = "0.1.0"
