"""Basis banks stay orthonormal while they train, and weights read back by projection."""

import torch

from orthotalk.navigation import BANK_ORDER, LatentNavigation, combine_motion, navigate, project

torch.manual_seed(0)
nav = LatentNavigation(64, {"mouth": 20, "pose": 6, "expression": 10})
opt = torch.optim.Adam(nav.parameters(), lr=0.05)


def gram_error():
    b = nav.all_bases().double()
    return (b @ b.T - torch.eye(len(b), dtype=torch.float64)).abs().max().item()


for it in range(50):
    loss = (nav.all_bases() * torch.randn(36, 64)).sum() + nav.weights("mouth", torch.randn(8, 64)).pow(2).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    if it % 10 == 0:
        print(f"step {it:2d}  max |B B^T - I| = {gram_error():.2e}")

banks = nav.banks()
w = {k: torch.randn(nav.bank_sizes[k]) for k in BANK_ORDER}
total = combine_motion(*(navigate(banks[k], w[k]) for k in BANK_ORDER))
for k in BANK_ORDER:
    print(f"{k:10s} weights recovered to {(project(total, banks[k]) - w[k]).abs().max().item():.1e}")
