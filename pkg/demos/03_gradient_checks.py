"""Compare every analytic gradient in the fitting graph with central differences.

    python demos/03_gradient_checks.py
"""

import warnings

import torch

from duplexfit.diff import ParamVector, finite_diff_check, gradient_suite

torch.set_num_threads(1)
warnings.simplefilter("ignore")

# The checker on its own: any scalar function of named tensor blocks.
f = lambda p: (p["a"] ** 2).sum() * p["b"].sin().sum()
at = ParamVector({"a": torch.randn(4, dtype=torch.float64), "b": torch.randn(3, dtype=torch.float64)})
rep = finite_diff_check(f, at, h=1e-5, n_probes=5)
print(f"toy function: max relative error {rep.worst:.1e}")

# The full suite: reprojection, photometric, silhouette and regulariser terms,
# skinning, the pose network, the texture field, a rendered pixel and the
# summed objective, all on a small scene in double precision.
for name, r in gradient_suite().items():
    print(f"{name:16s} {'ok ' if r.passed else 'BAD'} max rel error {r.worst:.1e}")
