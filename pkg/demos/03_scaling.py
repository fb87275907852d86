"""
Linear scan against quadratic attention
=======================================

A quick version of ``estf-tad bench``: forward time and peak allocation as the
sequence grows.
"""

from estf_tad.bench import scan_scaling

rep = scan_scaling(lengths=(512, 1024, 2048, 4096), reps=3)
print(rep.to_csv())
print(rep.summary())

# Doubling T should double TB-SSM's memory and roughly quadruple attention's time.
print("TB-SSM peak ratios:", [round(r, 2) for r in rep.peak_ratios("tb_ssm_forward")])
