#!/usr/bin/env python3
"""Compare mapinv's forward pass with torchvision's VGG-19.

Converts a randomly initialised torchvision VGG-19 (or uses the weights file
given with --weights together with --pretrained), runs both on the same
image and prints the largest relative difference of the per-channel sums at
a few relu layers. Differences around 1e-7 are float32 rounding.

    cargo build -p mapinv-cli
    python scripts/check_against_torchvision.py
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile

import numpy as np
import torch
from PIL import Image
from torchvision.models import VGG19_Weights, vgg19

HERE = os.path.dirname(os.path.abspath(__file__))
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
# positions of the relus in torchvision's `features`
RELUS = {1: "relu1_1", 11: "relu3_1", 20: "relu4_1", 29: "relu5_1"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mapinv", default=os.path.join(HERE, "..", "target", "debug", "mapinv"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrained", metavar="WEIGHTS", help="converted ImageNet weights to check instead")
    ap.add_argument("--tolerance", type=float, default=1e-5)
    args = ap.parse_args()

    tmp = tempfile.mkdtemp()
    if args.pretrained:
        weights = args.pretrained
        model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    else:
        weights = os.path.join(tmp, "random.safetensors")
        subprocess.run(
            [sys.executable, os.path.join(HERE, "convert_torchvision_vgg19.py"), "--random-seed", str(args.seed), weights],
            check=True,
        )
        torch.manual_seed(args.seed)
        model = vgg19(weights=None).eval()

    w, h = 64, 48
    pixels = np.fromfunction(
        lambda y, x, c: np.where(c == 0, x * 7, np.where(c == 1, y * 11, x * y // 3)) % 256, (h, w, 3), dtype=int
    ).astype(np.uint8)
    path = os.path.join(tmp, "probe.png")
    Image.fromarray(pixels).save(path)

    x = torch.from_numpy(((pixels / 255.0 - MEAN) / STD).astype(np.float32).transpose(2, 0, 1)).unsqueeze(0)
    reference = {}
    with torch.no_grad():
        for i, layer in enumerate(model.features):
            x = layer(x)
            if i in RELUS:
                reference[RELUS[i]] = x[0].sum(dim=(1, 2)).double().numpy()

    out = subprocess.run(
        [args.mapinv, "inspect", "--weights", weights, "--image", path, "--size", "0", "--layers", ",".join(RELUS.values())],
        check=True,
        capture_output=True,
        text=True,
        env={**os.environ, "RUST_LOG": "error"},
    )
    worst = 0.0
    for entry in json.loads(out.stdout)["layers"]:
        ref = reference[entry["layer"]]
        err = np.max(np.abs(np.array(entry["channel_sums"]) - ref)) / np.max(np.abs(ref))
        worst = max(worst, err)
        print(f"{entry['layer']:8s} {entry['shape']}  max rel. difference {err:.2e}")
    sys.exit(0 if worst <= args.tolerance else 1)


if __name__ == "__main__":
    main()
