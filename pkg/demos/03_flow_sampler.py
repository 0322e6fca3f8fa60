"""Rectified-flow sampling with a model that knows the answer.

If the velocity model returns the exact direction towards a fixed target,
30 Euler steps land on it.  With half of the frames given as context, those
frames come out untouched.

Run: python demos/03_flow_sampler.py
"""
import torch

from plumeflow.diffusion import DiffusionSchedule, context_mask, corrupt, sample

sched = DiffusionSchedule()
g = torch.Generator().manual_seed(0)
target = torch.randn(1, 6, 3, 4, 8, generator=g)
noise = torch.randn(1, 6, 3, 4, 8, generator=g)

print("corrupt at t=0 is the data:", torch.equal(corrupt(target, noise, 0, sched), target))
print("corrupt at t=T is the noise:", torch.equal(corrupt(target, noise, sched.T, sched), noise))


def oracle(z, t):
    a = sched.alpha(t.to(z.dtype)).reshape(-1, 1, 1, 1, 1)
    return target - (z - a * target) / (1 - a)


out = sample(oracle, noise, sched)
print("max error after sampling:", (out - target).abs().max().item())

context = torch.randn_like(target)
out = sample(oracle, noise, sched, mask=context_mask(1, 6, 3), context=context)
print("context frames kept:", torch.equal(out[:, :3], context[:, :3]))
print("free frames error:", (out[:, 3:] - target[:, 3:]).abs().max().item())
