"""Walk through the uncertainty arithmetic on small hand-made inputs.

Run with ``python demos/01_uncertainty_building_blocks.py``; it finishes in
a few seconds and writes nothing to disk.
"""

import math

import numpy as np

from bayesgrid import autodiff as ad
from bayesgrid.bayes import entropy, mutual_information, predictive_cls, variance_decomposition
from bayesgrid.geometry import BBox, PriorBox, decode_box, encode_ground_truth
from bayesgrid.loss import aleatoric_loc_loss, l2_loc_loss


def section(title):
    print(f"\n== {title} ==")


section("loss attenuation")
y, f = np.array([2.0, -1.0]), np.array([1.5, 0.5])
print("plain l2:", float(l2_loc_loss(y, ad.Tensor(f)).data))
for s in (-2.0, 0.0, 2.0):
    val = float(aleatoric_loc_loss(y, ad.Tensor(f), np.full(2, s)).data)
    print(f"aleatoric loss with log-variance s={s:+.0f}: {val:.4f}")
# per entry the minimum over s sits at s = log((y - f)^2)
best_s = np.log((y - f) ** 2)
print("minimising s per entry:", np.round(best_s, 4))

section("box codec")
prior = PriorBox(12.0, 28.0, 0, 0, 0)
box = BBox(21.0, 13.5, 10.0, 30.0)
raw = encode_ground_truth(box, (2, 1), prior, 8)
print("raw targets:", np.round(raw, 4))
print("decoded back:", decode_box(raw, (2, 1), prior, 8))

section("epistemic and aleatoric variance")
rng = np.random.default_rng(0)
passes = rng.normal([10.0, 4.0, 0.2, -0.1], [0.5, 0.5, 0.05, 0.05], size=(20, 4))
predicted_var = np.full((20, 4), 0.03)
epi, alea, total = variance_decomposition(passes, predicted_var)
for name, e, a, t in zip("xywh", epi, alea, total):
    print(f"{name}: epistemic {e:.4f}  aleatoric {a:.4f}  total {t:.4f}")
print("identical passes ->", variance_decomposition(np.ones((8, 4)))[0])

section("mutual information")
agree = np.array([[0.9, 0.1]] * 10)
disagree = np.array([[0.99, 0.01], [0.01, 0.99]] * 5)
for label, samples in (("confident and consistent", agree), ("confident but contradictory", disagree)):
    mean = predictive_cls(samples)
    print(f"{label}: mean {np.round(mean, 3)}, H[mean] {entropy(mean):.4f}, MI {mutual_information(samples):.4f}")
print(f"binary passes 0/1 give MI {mutual_information(np.array([0.0, 1.0])):.6f} = ln 2 = {math.log(2):.6f}")
