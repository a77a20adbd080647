"""Shape-prior rescoring changes which of two overlapping detections survives NMS.

Detection A has the higher class score but a mask far from any stored shape;
B scores slightly lower and matches a prior well.

    python3 demos/rescoring.py
"""

import numpy as np

from amodalseg.inference import nms_indices, rescore, rescored_fixture
from amodalseg.types import BoundingBox, box_iou

class_scores = [0.99, 0.97]
similarities = [0.69, 0.91]
boxes = [[10, 10, 40, 40], [12, 11, 42, 41]]

print("box IoU", round(box_iou(BoundingBox(*boxes[0]), BoundingBox(*boxes[1])), 3))
fused = rescore(class_scores, similarities)
for name, s, sim, f in zip("AB", class_scores, similarities, fused):
    print(f"{name}: class {s:.2f} x similarity {sim:.2f} = {f:.4f}")

print("NMS on class scores keeps", ["AB"[i] for i in nms_indices(boxes, class_scores, 0.5)])
print("NMS on rescored scores keeps", ["AB"[i] for i in nms_indices(boxes, fused, 0.5)])

# the same through Detection objects, with masks filling each box
kept = rescored_fixture(class_scores, similarities, boxes)
print("detections kept:", [("AB"[d.extras["index"]], round(d.class_score, 4)) for d in kept])

# equal similarity scales every score by the same factor, so the ranking never changes
s = np.array([0.9, 0.5, 0.7])
print("uniform similarity 0.5:", rescore(s, np.full(3, 0.5)), "order", np.argsort(-rescore(s, np.full(3, 0.5))))
