"""Distribution backtracking distillation on toy 2D mixtures."""
