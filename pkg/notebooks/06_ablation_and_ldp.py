"""
The ablation table and the LDP sweep through the experiment layer
=================================================================

Same calls as ``python -m cgfedrec ablation`` / ``ldp-sweep``.
"""
import tempfile

from cgfedrec import experiments as ex

out = tempfile.mkdtemp()
spec = ex.ExperimentSpec(n_rounds=30, d=16, k=4, early_stop_patience=0, output_dir=out)

print(ex.format_table(ex.run_ablation_suite(spec)))
print()
print(ex.format_table(ex.run_ldp_sweep(spec, deltas=(0.0, 0.1, 0.3, 0.5))))
print("artifacts in", out)
