"""Desk-scale GRPO sample-reuse lab: policy model, GRPO objective, gradient gating and bound checks."""
