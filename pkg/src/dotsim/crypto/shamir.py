"""Shamir secret sharing and Lagrange interpolation over the signature group's scalar field."""

from __future__ import annotations

from dotsim.crypto.pkc import Q


def eval_poly(coeffs: list[int], x: int) -> int:
    """Evaluate a polynomial (coeffs[0] is the constant term) at x, mod Q."""
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % Q
    return acc


def share_secret(secret: int, threshold: int, indices: list[int], coeff_seed: list[int]) -> dict[int, int]:
    """Deal shares of `secret` at the given indices with a degree threshold-1 polynomial.

    `coeff_seed` supplies the threshold-1 non-constant coefficients (callers
    derive them deterministically).
    """
    if len(coeff_seed) != threshold - 1:
        raise ValueError("need threshold-1 coefficients")
    coeffs = [secret % Q] + [c % Q for c in coeff_seed]
    return {i: eval_poly(coeffs, i) for i in indices}


def lagrange_at_zero(indices: list[int]) -> dict[int, int]:
    """Lagrange coefficients for interpolating f(0) from points at `indices`."""
    out = {}
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j == i:
                continue
            num = (num * (-j)) % Q
            den = (den * (i - j)) % Q
        out[i] = (num * pow(den, -1, Q)) % Q
    return out


def interpolate_at_zero(points: dict[int, int]) -> int:
    coeffs = lagrange_at_zero(sorted(points))
    return sum(coeffs[i] * points[i] for i in points) % Q
