"""
The training objective
======================

Dice on the self-prompted prediction, plus a Bernoulli KL that pulls the
promptless prediction toward it. The refined prediction acts as teacher and
receives no gradient from the KL term.
"""

import torch

from selfprompt.losses import LossConfig, dice_loss, kl_self_distill, total_loss

target = torch.zeros(1, 8, 8)
target[0, 2:6, 2:6] = 1
student = torch.full((1, 8, 8), 0.3, requires_grad=True)
teacher = (0.1 + 0.8 * target).requires_grad_(True)

print("dice(teacher)", dice_loss(teacher, target).item())
print("KL(teacher || student)", kl_self_distill(student, teacher).item())

for alpha in (0.0, 0.5, 1.0):
    br = total_loss(student, teacher, target, LossConfig(alpha=alpha))
    print(alpha, br.record())

kl_self_distill(student, teacher).backward()
print("teacher grad from KL:", teacher.grad, " student grad norm:", float(student.grad.norm()))
