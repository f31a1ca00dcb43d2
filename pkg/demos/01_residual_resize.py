"""Residual resizing generator: what the network adds on top of a plain resize."""

import torch

from residualgan.nets import ResiGeneratorConfig, build_resi_generator, resize_image

torch.manual_seed(0)

# a 112 px source tile mapped to a 64 px target tile
cfg = ResiGeneratorConfig(112, 64, depth=4, width=8)
gen = build_resi_generator(cfg).eval()
x = torch.rand(1, 3, 112, 112) * 2 - 1

with torch.no_grad():
    y = gen(x)
    plain = resize_image(x, 64, "bilinear")
print("output shape", tuple(y.shape))
print("k =", gen.k.item())

# the backbone output is the only difference from a bilinear resize of k*x
with torch.no_grad():
    correction = y - gen.k * plain
print("mean |correction|", correction.abs().mean().item())

# with the backbone zeroed the generator is exactly a resize
for p in gen.backbone.parameters():
    torch.nn.init.zeros_(p)
with torch.no_grad():
    print("zero backbone max error", (gen(x) - plain).abs().max().item())

# residual off: the output is only the resized backbone
off = build_resi_generator(ResiGeneratorConfig(112, 64, depth=4, width=8, residual=False)).eval()
with torch.no_grad():
    print("residual off, output std", off(x).std().item())
