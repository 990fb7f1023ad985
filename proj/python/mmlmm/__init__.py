"""Maximum likelihood for longitudinal multiple-membership linear mixed models."""

from ._core import fit, oracle_loglik, ots_pattern, simulate

__all__ = ["fit", "oracle_loglik", "ots_pattern", "simulate"]
