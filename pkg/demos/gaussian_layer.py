"""From a bank of random Gaussians to a trainable layer: PCA picks the basis,
the fast path is checked against the direct sum, and the effective filter is
written out as a PGM image."""
import sys
from pathlib import Path

import numpy as np

from gaussconv.gconv import GaussConvLayer, complexity_count, effective_filter, forward_fast, forward_lra_oracle
from gaussconv.experiments import to_gray, write_pgm
from gaussconv.kernels import sample_kernel_bank
from gaussconv.lowrank import pca_select

bank = sample_kernel_bank(100, 1.0, (-0.5, 0.5), rng_seed=0, support_radius=4)
basis = pca_select(bank, 8)
print("retained eigenvalues:", np.array2string(basis.eigenvalues, precision=2))

layer = GaussConvLayer.from_basis(basis, c_in=3, c_out=4, mean_spacing=2.0, rng=1)
x = np.random.default_rng(2).normal(size=(3, 32, 32))
gap = np.abs(forward_fast(x, layer) - forward_lra_oracle(x, layer)).max()
print(f"fast path vs direct low-rank sum: {gap:.1e}")

vanilla, lra, fast = complexity_count(layer, x.shape, 256)
print(f"multiply-adds for 256 kernels: vanilla {vanilla:,}, low-rank {lra:,}, fast {fast:,}")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("effective_filter.pgm")
write_pgm(out, to_gray(effective_filter(layer)))
print("wrote", out)
