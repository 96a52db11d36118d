"""Rotary-embedding properties: the complex-multiplication oracle, norm
preservation, and the relative-shift identity."""

import numpy as np
import pytest

from rosalab.errors import ConfigError
from rosalab.model import apply_rope, rope_rotate
from rosalab.tensor import Tensor, using_dtype


def complex_rope_oracle(z: np.ndarray, t: int, base: float) -> np.ndarray:
    """(z_real + i*z_imag) * e^(i*theta) per pair, written independently."""
    half = len(z) // 2
    zc = z[:half] + 1j * z[half:]
    theta = t * base ** (-2.0 * np.arange(half) / len(z))
    out = zc * np.exp(1j * theta)
    return np.concatenate([out.real, out.imag])


def test_zero_position_is_identity(rng):
    z = rng.normal(size=8)
    np.testing.assert_array_equal(rope_rotate(z, 0, 10000.0), z)


def test_hand_case_first_pair():
    out = rope_rotate(np.array([1.0, 0.0, 0.0, 0.0]), 1, 10000.0)
    np.testing.assert_allclose(out, [np.cos(1.0), 0.0, np.sin(1.0), 0.0], atol=1e-15)


def test_matches_complex_oracle(rng):
    for _ in range(20):
        d_h = int(rng.choice([4, 8, 16]))
        z = rng.normal(size=d_h)
        t = int(rng.integers(0, 512))
        np.testing.assert_allclose(
            rope_rotate(z, t, 10000.0), complex_rope_oracle(z, t, 10000.0), atol=1e-12
        )


def test_norm_preserved(rng):
    for _ in range(50):
        z = rng.normal(size=16)
        t = int(rng.integers(0, 2048))
        out = rope_rotate(z, t, 10000.0)
        assert abs(np.linalg.norm(out) - np.linalg.norm(z)) <= 1e-12


def test_relative_shift_identity(rng):
    for _ in range(25):
        q = rng.normal(size=8)
        k = rng.normal(size=8)
        t1, t2, s = (int(x) for x in rng.integers(0, 256, size=3))
        lhs = np.dot(rope_rotate(q, t1, 10000.0), rope_rotate(k, t2, 10000.0))
        rhs = np.dot(rope_rotate(q, t1 + s, 10000.0), rope_rotate(k, t2 + s, 10000.0))
        assert abs(lhs - rhs) <= 1e-9


def test_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        rope_rotate(np.zeros(5), 1, 10000.0)


def test_batched_tensor_path_matches_per_vector(rng):
    with using_dtype(np.float64):
        x = rng.normal(size=(2, 3, 5, 8))  # [b, h, l, d_h]
        out = apply_rope(Tensor(x), 10000.0).numpy()
        for b in range(2):
            for h in range(3):
                for t in range(5):
                    np.testing.assert_allclose(
                        out[b, h, t], rope_rotate(x[b, h, t], t, 10000.0), atol=1e-12
                    )
