#!/usr/bin/env python3
"""Export torchvision ResNet-18 / DenseNet-121 weights as safetensors.

The output file is named <arch>.safetensors and uses the torchvision
state_dict keys, which is what `cxrtl` expects in CXRTL_WEIGHTS_DIR.

    python scripts/export_torchvision_weights.py --arch resnet18 --out weights/
    python scripts/export_torchvision_weights.py --arch densenet121 --out weights/

With --random the network keeps its seeded random initialization instead of
downloading ImageNet weights, and --reference also writes a probe input and
the matching pooled features and logits (useful for parity checks).
"""

import argparse
import pathlib

import torch
import torchvision
from safetensors.torch import save_file

ARCHS = {
    "resnet18": (torchvision.models.resnet18, "ResNet18_Weights"),
    "densenet121": (torchvision.models.densenet121, "DenseNet121_Weights"),
}


def build(arch, random_init):
    ctor, weights_enum = ARCHS[arch]
    if random_init:
        return ctor(weights=None)
    weights = getattr(torchvision.models, weights_enum).IMAGENET1K_V1
    return ctor(weights=weights)


def features(model, arch, x):
    if arch == "resnet18":
        m = model
        y = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        y = m.layer4(m.layer3(m.layer2(m.layer1(y))))
        return torch.flatten(m.avgpool(y), 1)
    y = torch.relu(model.features(x))
    return torch.flatten(torch.nn.functional.adaptive_avg_pool2d(y, 1), 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", choices=sorted(ARCHS), required=True)
    ap.add_argument("--out", type=pathlib.Path, required=True)
    ap.add_argument("--random", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reference", action="store_true")
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    model = build(args.arch, args.random).eval()
    if args.random:
        # non-trivial normalization statistics so eval-mode BN is exercised
        for mod in model.modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.running_mean.normal_(0.0, 0.1)
                mod.running_var.uniform_(0.5, 1.5)
                mod.weight.data.uniform_(0.5, 1.5)
                mod.bias.data.normal_(0.0, 0.1)

    args.out.mkdir(parents=True, exist_ok=True)
    state = {
        k: v.detach().contiguous().float()
        for k, v in model.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    path = args.out / f"{args.arch}.safetensors"
    save_file(state, str(path))
    print(f"wrote {path} ({len(state)} tensors)")

    if args.reference:
        x = torch.randn(2, 3, args.size, args.size)
        with torch.no_grad():
            feats = features(model, args.arch, x)
            logits = model(x)
        ref = args.out / f"{args.arch}.reference.safetensors"
        save_file({"input": x, "features": feats, "logits": logits}, str(ref))
        print(f"wrote {ref}")


if __name__ == "__main__":
    main()
