"""
Single-pixel NO2 loss and weighted land-cover loss
==================================================

"""

import math

import torch

from no2dense.loss import LossConfig, class_weights_from_counts, combined_loss, sel, weighted_cel

# the NO2 term only looks at one pixel of the predicted plane
plane = torch.zeros(1, 8, 8, requires_grad=True)
loss = sel(2.0, plane, (3, 4))
loss.backward()
print("sel", loss.item(), "nonzero grads", int(torch.count_nonzero(plane.grad)))

# uniform logits give ln(11) whatever the mask
logits = torch.zeros(11, 16, 16)
mask = torch.randint(0, 11, (16, 16))
print("uniform CE", round(weighted_cel(logits, mask, [1.0] * 11).item(), 5), "ln 11 =", round(math.log(11), 5))

# rare classes get larger weights
print(class_weights_from_counts([300, 100] + [0] * 9)[:2])

total, s, c = combined_loss(3.0, torch.ones(1, 4, 4), (0, 0), logits, mask, LossConfig(lam=1.0))
print(f"total {total.item():.5f} = sel {s.item():.1f} + cel {c.item():.5f}")
