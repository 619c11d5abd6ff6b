"""
Metrics and report tables
=========================

"""

import numpy as np

from no2dense.evaluator import EvalReport, format_table, metrics

y = np.array([12.0, 25.0, 31.0, 18.0, 40.0])
print(metrics(y, y))
print(metrics(np.full_like(y, y.mean()), y))
print(metrics([1.0, 2.0], [2.0, 4.0]))

rng = np.random.default_rng(0)
reports = [
    EvalReport.from_predictions("test", y + rng.normal(0, s, y.size), y, {"kind": k, "loss": "no2", "P": 8})
    for k, s in (("unet", 4.0), ("autoencoder", 3.0))
]
# reference numbers are printed under a [literature] tag, never as targets
print(format_table(reports))
