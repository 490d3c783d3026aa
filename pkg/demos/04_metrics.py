"""The evaluation metrics on hand-built inputs.

    python3 demos/04_metrics.py
"""
import numpy as np

from onegan.eval import ami, cluster_codes, conditional_is, dice, iou, nmi

# class-averaged oracle predictions: a perfect conditional generator puts each
# class's mass on its own label, a collapsed one predicts the same mix everywhere
print("C-IS, one-hot rows over 12 classes:", conditional_is(np.eye(12)))
print("C-IS, identical rows:              ", conditional_is(np.full((12, 12), 1 / 12)))
soft = 0.7 * np.eye(12) + 0.3 / 12
print("C-IS, 70% on the right class:      ", round(conditional_is(soft), 3))

# clustering agreement ignores label names
print("NMI of a relabelling:", nmi([0, 0, 1, 1, 2, 2], [2, 2, 0, 0, 1, 1]))
print("NMI of independent labels:", nmi([0, 1, 0, 1], [0, 0, 1, 1]))
rng = np.random.default_rng(0)
truth = rng.integers(0, 4, 400)
noisy = np.where(rng.random(400) < 0.8, truth, rng.integers(0, 4, 400))
print(f"80% correct labels: NMI {nmi(truth, noisy):.3f}  AMI {ami(truth, noisy):.3f}")

# k-means on codes: well-separated blobs come back exactly
centres = rng.normal(0, 10, (4, 48))
feats = centres[truth] + rng.normal(0, 0.5, (400, 48))
print("NMI of k-means on 4 blobs:", round(nmi(truth, cluster_codes(feats, k=4)), 3))

# masks: two pixels each, one shared
a = np.array([[1, 1], [0, 0]], bool)
b = np.array([[1, 0], [1, 0]], bool)
j = iou(a, b)
print(f"IOU {j:.4f}  DICE {dice(a, b):.4f}  2J/(1+J) {2 * j / (1 + j):.4f}")
