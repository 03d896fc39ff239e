# A regression tree as a 0/1 design matrix.
#
# Five points, three leaves.  Each row of D has a single 1 marking the leaf
# its point falls into, so D @ mu is the tree's prediction.
import numpy as np

from cbartgp import build_dummy, reorder
from cbartgp.simgen import gen_figure1_example

ex = gen_figure1_example(leaf_means=(1.0, 2.0, 3.0))
design = build_dummy(ex.tree, ex.X)

print("leaf index sets:", [o.tolist() for o in design.omega])
D = design.matrix()
print("D =\n", D.astype(int))
print("D @ mu          :", D @ ex.tree.leaf_means)
print("tree.predict(X) :", ex.tree.predict(ex.X))

# Sorting rows leaf by leaf gives a block design; P maps it back.
perm, P, D_P = reorder(design)
print("row order:", perm)
print("D_P =\n", D_P.astype(int))
print("P @ D_P == D:", np.array_equal(P @ D_P, D))
