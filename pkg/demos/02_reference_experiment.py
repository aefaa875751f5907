"""Train the desk-scale reference detector and run every analysis on it.

    python demos/02_reference_experiment.py [output_dir]

Training takes roughly 20 CPU-minutes on first run. The trained model is
cached in ``<output_dir>/run`` (or ``$BAYESGRID_REFERENCE_DIR``, shared with
the acceptance tests) and reused afterwards, so re-running only
repeats the analyses. Outputs (tables, CSV, SVG plots, PPM overlays) go to
``output_dir`` (default ``demos/out``).
"""

import os
import pathlib
import sys

import numpy as np

from bayesgrid.evalkit import (
    assign_for_analysis, correlation_report, iou_uncertainty_bins, metrics_report, objectness_mi_contrast,
    occlusion_correlation, write_bins_csv, write_correlation_csv, write_curve_csv,
)
from bayesgrid.pipeline import evaluate_net, render_heatmaps, run_inference, timing_sweep, timing_table, val_mc, write_ppm
from bayesgrid.reference import ANALYSIS_MC, reference_config, reference_data, run_reference
from bayesgrid.svgplot import line_chart, write_svg

out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent / "out")
out.mkdir(parents=True, exist_ok=True)

print("generating 2000 train / 500 validation scenes")
train_set, val_set = reference_data()

run = run_reference(os.environ.get("BAYESGRID_REFERENCE_DIR", out / "run"), data=(train_set, val_set))
net = run.network()
print(f"best checkpoint: iteration {run.best_iteration} (val LAMR {run.best_val_lamr:.4f}); "
      f"training took {run.cpu_seconds / 60:.1f} CPU-minutes")

# detection quality with the validation MC setting used during training
value, curve, _ = evaluate_net(net, val_set, val_mc(reference_config(), net))
n_gt = sum(len(val_set.ground_truths(i)) for i in range(len(val_set)))
print(metrics_report(curve, value, len(val_set), n_gt))
write_curve_csv(out / "mr_fppi.csv", curve)
write_svg(out / "mr_fppi.svg", line_chart({"reference": ([c.fppi for c in curve], [c.miss_rate for c in curve])},
                                         "miss rate vs FPPI", "FPPI", "miss rate", logx=True, logy=True))

# everything below uses T=20 stochastic passes
res = run_inference(net, val_set, ANALYSIS_MC)
gts = list(res.gts.values())

print("\nocclusion level vs predicted variance, per prior")
table = occlusion_correlation(assign_for_analysis(gts, net.geometry, net.priors), res.summaries, gts)
print(correlation_report(table))
write_correlation_csv(out / "occlusion_correlation.csv", table)

dets = [d for v in res.detections.values() for d in v]
bins, edges = iou_uncertainty_bins(dets, res.gts, 0.1)
write_bins_csv(out / "iou_bins.csv", bins, edges)
series = {f"prior {p + 1}": ([0.5 * (edges[b] + edges[b + 1]) for b in sorted(bins[p])],
                             [bins[p][b]["total"] for b in sorted(bins[p])]) for p in sorted(bins)}
write_svg(out / "iou_bins.svg", line_chart(series, "total variance vs IoU", "IoU with best gt", "mean total variance",
                                           logy=True))

fg, bg = objectness_mi_contrast(res.summaries, res.detections, res.gts, net.geometry, net.priors)
print("\nobjectness MI, matched detections vs background cells")
for p in sorted(set(fg) | set(bg)):
    f = f"{np.mean(fg[p]):.3e} (n={len(fg[p])})" if fg.get(p) else "-"
    b = f"{np.mean(bg[p]):.3e} (n={len(bg[p])})" if bg.get(p) else "-"
    print(f"prior {p + 1}: matched {f}, background {b}")

print("\nlatency per image vs number of stochastic passes")
rows = timing_sweep(net, val_set, (1, 5, 10, 20, 50), repeats=20, lamr_limit=100)
table_text = timing_table(rows)
print(table_text)
(out / "timing.txt").write_text(table_text + "\n")

# overlays for the first validation image with an occluded object
idx = next(i for i, anns in enumerate(val_set.annotations) if any(a.occlusion_level >= 2 for a in anns))
for measure in ("alea_h", "epi_h", "objectness_mi"):
    for prior in net.priors:
        rgb = render_heatmaps(res.summaries[idx], val_set.images[idx], measure, prior.global_id, net.geometry, net.priors)
        write_ppm(out / f"heatmap_{val_set.ids[idx]}_{measure}_prior{prior.global_id + 1}.ppm", rgb)
print(f"\nwrote tables, plots and overlays to {out}")
