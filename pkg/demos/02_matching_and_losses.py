"""
Set matching and the training losses
====================================

The decoder emits N predictions, each a selection probability and a unit
semantic vector. Targets are padded to N with empty elements, matched to
predictions by a minimum-cost assignment, and scored.
"""

import numpy as np

from rarrg.embedding import l2_normalize
from rarrg.losses import LossConfig, MatchedExample, semantic_contrastive_loss, total_loss
from rarrg.matching import build_cost_matrix, hungarian

rng = np.random.default_rng(0)
N, d = 6, 16

# three target phrases and six predictions; predictions 4, 0 and 2 resemble the targets
targets = l2_normalize(rng.normal(size=(3, d)))
semantics = l2_normalize(rng.normal(size=(N, d)) * 0.3)
semantics[[4, 0, 2]] = l2_normalize(targets + 0.2 * rng.normal(size=(3, d)))
probs = np.array([0.8, 0.1, 0.7, 0.2, 0.9, 0.05])

# cost is -(mu * p + cos) for real targets and zero for padding rows
cost = build_cost_matrix(targets, probs, semantics, mu=0.5)
print(np.round(cost, 3))

assignment = hungarian(cost)
print("target -> prediction:", assignment.sigma[:3], "total cost", round(assignment.total_cost, 4))

# Taking the cheapest column row by row can be far from optimal.
small = np.array([[1.0, 2.0], [1.0, 10.0]])
print("greedy picks (0, 1) for", small[0, 0] + small[1, 1], "; optimal", hungarian(small))

cfg = LossConfig(pos_class_size=3.0)
example = MatchedExample(targets, probs, semantics, assignment)
print("total loss:", round(total_loss([example], cfg), 4))

# The contrastive term vanishes for a single pair and grows as pairs get confusable.
print("one pair:", abs(semantic_contrastive_loss(example.pairs()[:1], cfg)))
print("all matched pairs:", round(semantic_contrastive_loss(example.pairs(), cfg), 4))
