"""How each training objective reacts to simple inputs.

Run with ``python demos/01_losses_tour.py``. Everything is in float64 and
takes well under a second.
"""
import math

import torch

from minmaxsim import losses

torch.manual_seed(0)

# A 16 x 16 mask with a vertical bar; the weight map peaks along its edges.
y = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
y[..., 6:10] = 1.0
w = losses.weight_map(y, kernel=5)
print("weight map row 8:", [round(v, 2) for v in w[0, 0, 8].tolist()])

# Supervised loss falls as the prediction approaches the mask.
for blend in (0.0, 0.5, 0.9, 1.0):
    p = (blend * y + (1 - blend) * 0.5).clamp(1e-6, 1 - 1e-6)
    print(f"sup_loss with prediction {blend:.1f} of the way to the mask: {losses.sup_loss(p, y).item():.4f}")

# Similarity is symmetric and only the prediction slot carries gradient.
p1 = torch.rand(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
p2 = torch.rand(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
sim = losses.similarity_loss(p1, p2)
sim.backward()
print(f"similarity(p1, p2) = {sim.item():.4f}, equal to similarity(p2, p1): "
      f"{sim.item() == losses.similarity_loss(p2, p1).item()}")

# All-negative InfoNCE: orthogonal vectors give log(1 + K).
q = torch.eye(5, dtype=torch.float64)[:1]
k = torch.eye(5, dtype=torch.float64)[1:]
print(f"all-negative InfoNCE, 4 orthogonal keys: {losses.info_nce_all_negative(q, k).item():.6f} "
      f"(log 5 = {math.log(5):.6f})")

# Pixel InfoNCE on orthonormal fibers: every location matches only itself.
f = torch.eye(9, dtype=torch.float64).reshape(1, 9, 3, 3)
value = losses.pixel_info_nce(f, f, tau=0.5, k_neg=8)
print(f"pixel InfoNCE, orthonormal fibers: {value.item():.6f} "
      f"(closed form {math.log(1 + 8 * math.exp(-2)):.6f})")

# The weighted sum used for training.
total = losses.total_loss(1.0, 2.0, 3.0, 4.0, losses.LossWeights(0.2, 0.2, 0.3, 0.3))
print(f"total loss for components (1, 2, 3, 4): {total:.2f}")
