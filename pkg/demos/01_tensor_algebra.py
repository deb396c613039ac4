"""Tensor algebra walkthrough: mode-k products, the vectorization identity,
and energy-preserving factor extraction.

Run:  python3 demos/01_tensor_algebra.py
"""

import numpy as np

from mclkit import tensor

rng = np.random.default_rng(0)

# A mode-k product contracts one mode of a tensor with a matrix.  Sensing a
# 32x32x3 image down to 6x6x1 measurements is just three of these in a row.
image = rng.random((32, 32, 3))
factors = [rng.normal(size=(6, 32)), rng.normal(size=(6, 32)), rng.normal(size=(1, 3))]
z = tensor.multi_mode_product(image, factors)
print(f"signal {image.shape} -> measurements {z.shape} "
      f"(rate {z.size / image.size:.4f})")

# The separable map has an equivalent flat form: vectorize the signal and
# multiply by the Kronecker chain of the factors.  Same numbers, same order.
flat = tensor.kron_chain(factors) @ tensor.vectorize(image)
print("max |separable - kronecker|:", np.max(np.abs(tensor.vectorize(z) - flat)))

# Products on distinct modes commute, so the mode order is irrelevant.
alt = image
for k in (2, 0, 1):
    alt = tensor.mode_k_product(alt, factors[k], k)
print("max |mode order 0,1,2 - order 2,0,1|:", np.max(np.abs(z - alt)))

# Truncated per-mode singular vectors give the energy-preserving projection
# used to initialise the sensing factors: compare reconstruction error against
# random orthonormal projections of the same size.
samples = rng.normal(size=(20, 8, 8, 3))
hosvd = tensor.hosvd_factors(samples, (4, 4, 1))


def reconstruction_error(fs):
    err = 0.0
    for s in samples:
        zz = tensor.multi_mode_product(s, fs)
        err += float(np.sum((tensor.multi_mode_product(zz, [f.T for f in fs]) - s) ** 2))
    return err


base = reconstruction_error(hosvd)
print(f"\nreconstruction error, top singular-vector factors: {base:.2f}")
for trial in range(3):
    rand = []
    for t, d in zip((4, 4, 1), (8, 8, 3)):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        rand.append(q[:, :t].T)
    print(f"reconstruction error, random orthonormal draw {trial}: "
          f"{reconstruction_error(rand):.2f}")
