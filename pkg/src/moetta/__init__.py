"""Mixture-of-experts LayerNorm test-time adaptation at desk scale."""
