#!/usr/bin/env python3
"""Convert torchvision's ImageNet VGG-19 into the safetensors file mapinv loads.

mapinv feeds the network RGB values in 0..255 with the ImageNet channel means
subtracted and no further scaling. torchvision's weights expect
(x / 255 - mean) / std, so the per-channel 1 / (255 * std) factor is folded
into the first convolution. Only the convolutional trunk is kept, under the
original `features.N.weight` / `features.N.bias` names.

    pip install torch torchvision safetensors
    python scripts/convert_torchvision_vgg19.py vgg19.safetensors

`--random-seed N` converts a randomly initialised model instead, which is
handy for checking the pipeline without downloading anything.
"""

import argparse
import hashlib

import torch
from safetensors.torch import save_file
from torchvision.models import VGG19_Weights, vgg19

STD = (0.229, 0.224, 0.225)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", help="output .safetensors path")
    ap.add_argument("--random-seed", type=int, help="skip the download and use random weights")
    args = ap.parse_args()

    if args.random_seed is None:
        model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    else:
        torch.manual_seed(args.random_seed)
        model = vgg19(weights=None).eval()
    tensors = {}
    for name, t in model.features.state_dict().items():
        tensors[f"features.{name}"] = t.detach().to(torch.float32).contiguous()

    scale = torch.tensor([1.0 / (255.0 * s) for s in STD]).view(1, 3, 1, 1)
    tensors["features.0.weight"] = (tensors["features.0.weight"] * scale).contiguous()

    save_file(tensors, args.out)
    digest = hashlib.sha256(open(args.out, "rb").read()).hexdigest()
    print(f"wrote {args.out} ({len(tensors)} tensors), sha256 {digest}")


if __name__ == "__main__":
    main()
