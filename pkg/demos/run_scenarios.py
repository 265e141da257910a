"""Both end-to-end scenarios at their default settings, with markdown reports.

    python3 demos/run_scenarios.py out_dir [fit|ablation|both]

The ablation trains twelve regressors and takes around half an hour on one core.
"""
import sys
from pathlib import Path

from bodyfit.scenarios import scenario_ssp3d, scenario_straps

out = Path(sys.argv[1] if len(sys.argv) > 1 else "scenario_out")
which = sys.argv[2] if len(sys.argv) > 2 else "both"
if which in ("fit", "both"):
    r = scenario_ssp3d(0, out, progress=lambda k, row: print(f"trial {k}: ratio {row['pve_ratio']:.3f}"))
    print(f"recovered {r['recovered']}/10, multi-frame not worse {r['multi_not_worse']}/10")
if which in ("ablation", "both"):
    r = scenario_straps(0, out, progress=lambda v, t, pve: print(v, t, pve))
    print(r["checks"]["majority"])
print(f"reports in {out}")
