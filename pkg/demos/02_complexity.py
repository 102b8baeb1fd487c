"""
What axial attention saves
==========================

The nominal costs quoted for a 32^3 input, and multiply-accumulate counts
taken from the running kernels at a few small sizes.
"""
from axial3d import evalbench as eb

r = eb.cost_model(32, 32, 32)
print(f"full attention at 32^3:  {r.nonlocal_nominal:,}")
print(f"axial attention at 32^3: {r.axial_nominal:,}")
print(f"savings: {r.savings_fraction:.2%}")

# Counted MACs: full attention builds an N x N score matrix (d*N^2 MACs) and
# applies it (another d*N^2).  Axial attention only builds L x L scores per fiber.
for n in (4, 8, 16):
    full = eb.measured_cost("nonlocal", (n, n, n), 8)
    axial = eb.measured_cost("axial", (n, n, n), 8)
    print(f"{n:>2}^3  full {full:>13,}  axial {axial:>10,}  ratio {axial / full:.4f}")

# The same numbers as the tab-separated bench report (times are wall clock).
print()
for row in eb.bench([(4, 4, 4), (8, 8, 8)], d=8):
    print(row)
