"""Nearest-codebook lookup and the straight-through gradient, by hand.

Run: python demos/02_codebook_lookup.py
"""
import torch

from plumeflow.autoencoders import quantize, straight_through, vqvae_loss

book = torch.tensor([[0.0, 0.0], [1.0, 1.0], [-1.0, 2.0]])
# three latent vectors laid out as a 1x3 spatial map with 2 channels
z_e = torch.tensor([[0.9, 0.5, -0.8], [0.9, 0.5, 1.7]]).reshape(1, 2, 1, 3).requires_grad_()

q = quantize(z_e, book)
print("indices:", q.indices.tolist())  # (0.5, 0.5) is equidistant from codes 0 and 1: lowest index wins
print("quantized:", q.z_q.squeeze(0).tolist())

# the decoder sees z_q in the forward pass, but gradients flow back to z_e unchanged
z = straight_through(q)
(z ** 2).sum().backward()
print("d/dz_e of sum(z_q^2):", z_e.grad.squeeze(0).tolist())

rep = vqvae_loss(torch.zeros(1), torch.zeros(1), q, beta=0.25)
print(f"codebook term {rep.kl_or_codebook.item():.4f}, commitment {rep.commit.item():.4f}")
