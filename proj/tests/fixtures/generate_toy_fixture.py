#!/usr/bin/env python3
"""Regenerates the committed toy-model fixture under tests/fixtures/toy/.

Trains two small CNNs on synthetic 32x32 images (a square and/or a disc, each
confined to one quadrant) and writes:

  gap.json / gap.gcw    conv -> relu -> pool -> conv -> relu -> gap -> dense
  fc.json  / fc.gcw     same trunk, then flatten -> dense -> relu -> dense
  images/NNN.ppm        two-object images (square and disc in different quadrants)
  images.json           object placement for every fixture image
  reference.json        float64 framework logits for the first 16 images

Labels are multi-label: class 0 "square" present, class 1 "disc" present.
Run once; the C++ tests only read its outputs.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SIZE = 32
HALF = SIZE // 2
MEAN = 0.5
STD = 0.5


def quadrant_origin(q):
    return (q // 2) * HALF, (q % 2) * HALF  # (row, col)


def draw_square(img, rng, q, color):
    side = int(rng.integers(6, 11))
    r0, c0 = quadrant_origin(q)
    y = r0 + int(rng.integers(1, HALF - side))
    x = c0 + int(rng.integers(1, HALF - side))
    img[y:y + side, x:x + side] = color
    return {"quadrant": int(q), "box": [int(y), int(x), side, side]}


def draw_disc(img, rng, q, color):
    radius = int(rng.integers(3, 6))
    r0, c0 = quadrant_origin(q)
    cy = r0 + int(rng.integers(radius + 1, HALF - radius))
    cx = c0 + int(rng.integers(radius + 1, HALF - radius))
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    img[mask] = color
    return {"quadrant": int(q), "box": [int(cy - radius), int(cx - radius), 2 * radius + 1, 2 * radius + 1]}


def render(rng, has_square, has_disc):
    img = rng.uniform(0.0, 0.3, size=(SIZE, SIZE, 3))
    quads = rng.permutation(4)
    meta = {}
    if has_square:
        meta["square"] = draw_square(img, rng, quads[0], rng.uniform(0.6, 1.0, size=3))
    if has_disc:
        meta["disc"] = draw_disc(img, rng, quads[1], rng.uniform(0.6, 1.0, size=3))
    pixels = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return pixels, meta


def to_input(pixels):
    x = pixels.astype(np.float64) / 255.0
    x = (x - MEAN) / STD
    return np.transpose(x, (2, 0, 1))


def make_dataset(rng, n):
    xs, ys = [], []
    for _ in range(n):
        has_square, has_disc = [(1, 0), (0, 1), (1, 1), (0, 0)][int(rng.integers(0, 4))]
        pixels, _ = render(rng, has_square, has_disc)
        xs.append(to_input(pixels))
        ys.append([has_square, has_disc])
    return torch.tensor(np.stack(xs), dtype=torch.float32), torch.tensor(ys, dtype=torch.float32)


class GapNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 5, padding=2)
        self.pool1 = nn.MaxPool2d(2, 2)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.fc = nn.Linear(32, 2)

    def forward(self, x):
        x = self.pool1(torch.relu(self.conv1(x)))
        x = torch.relu(self.conv2(x))
        return self.fc(x.mean(dim=(2, 3)))

    layers = [
        {"name": "conv1", "type": "conv2d", "out_channels": 16, "kernel": 5, "stride": 1, "padding": 2},
        {"name": "relu1", "type": "relu"},
        {"name": "pool1", "type": "maxpool2d", "window": 2, "stride": 2},
        {"name": "conv2", "type": "conv2d", "out_channels": 32, "kernel": 3, "stride": 1, "padding": 1},
        {"name": "relu2", "type": "relu"},
        {"name": "gap", "type": "gap"},
        {"name": "fc", "type": "dense", "out_features": 2},
    ]
    params = ["conv1", "conv2", "fc"]


class FcNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 5, padding=2)
        self.pool1 = nn.MaxPool2d(2, 2)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1)
        self.pool2 = nn.MaxPool2d(2, 2)
        self.fc1 = nn.Linear(16 * 8 * 8, 64)
        self.fc2 = nn.Linear(64, 2)

    def forward(self, x):
        x = self.pool1(torch.relu(self.conv1(x)))
        x = self.pool2(torch.relu(self.conv2(x)))
        x = torch.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)

    layers = [
        {"name": "conv1", "type": "conv2d", "out_channels": 16, "kernel": 5, "stride": 1, "padding": 2},
        {"name": "relu1", "type": "relu"},
        {"name": "pool1", "type": "maxpool2d", "window": 2, "stride": 2},
        {"name": "conv2", "type": "conv2d", "out_channels": 16, "kernel": 3, "stride": 1, "padding": 1},
        {"name": "relu2", "type": "relu"},
        {"name": "pool2", "type": "maxpool2d", "window": 2, "stride": 2},
        {"name": "flatten", "type": "flatten"},
        {"name": "fc1", "type": "dense", "out_features": 64},
        {"name": "relu3", "type": "relu"},
        {"name": "fc2", "type": "dense", "out_features": 2},
    ]
    params = ["conv1", "conv2", "fc1", "fc2"]


def train(model, data, labels, epochs, seed):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    loss_fn = nn.BCEWithLogitsLoss()
    n = data.shape[0]
    for epoch in range(epochs):
        perm = torch.randperm(n)
        total = 0.0
        for i in range(0, n, 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = loss_fn(model(data[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        print(f"  epoch {epoch + 1}: loss {total / n:.4f}")


def accuracy(model, data, labels):
    with torch.no_grad():
        pred = (model(data) > 0).float()
    return (pred == labels).all(dim=1).float().mean().item()


def write_gcw(path, model, names):
    state = model.state_dict()
    entries = []
    for layer in names:
        for suffix in ("weight", "bias"):
            entries.append((f"{layer}.{suffix}", state[f"{layer}.{suffix}"].detach().cpu().numpy().astype("<f4")))
    out = bytearray(b"GCW1")
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<B", 0)
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    path.write_bytes(bytes(out))


def write_spec(path, name, layers):
    spec = {
        "name": name,
        "input_shape": [3, SIZE, SIZE],
        "preprocess": {"mean": [MEAN] * 3, "std": [STD] * 3},
        "class_labels": ["square", "disc"],
        "layers": layers,
    }
    path.write_text(json.dumps(spec, indent=2) + "\n")


def write_ppm(path, pixels):
    h, w, _ = pixels.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--train-size", type=int, default=8000)
    ap.add_argument("--images", type=int, default=120)
    ap.add_argument("--out-dir", type=Path, default=Path(__file__).resolve().parent / "toy")
    args = ap.parse_args()

    torch.set_num_threads(1)
    rng = np.random.default_rng(args.seed)
    train_x, train_y = make_dataset(rng, args.train_size)
    test_x, test_y = make_dataset(rng, 1000)

    out = args.out_dir
    (out / "images").mkdir(parents=True, exist_ok=True)

    models = {}
    for name, cls in (("gap", GapNet), ("fc", FcNet)):
        torch.manual_seed(args.seed)
        model = cls()
        print(f"training {name}")
        train(model, train_x, train_y, args.epochs, args.seed)
        acc = accuracy(model, test_x, test_y)
        print(f"  held-out accuracy {acc:.4f}")
        if acc < 0.95:
            raise SystemExit(f"{name}: accuracy {acc:.4f} below 0.95; change --seed or --epochs")
        model.eval()
        write_spec(out / f"{name}.json", f"toy_{name}", cls.layers)
        write_gcw(out / f"{name}.gcw", model, cls.params)
        models[name] = model

    manifest = []
    inputs = []
    for i in range(args.images):
        pixels, meta = render(rng, True, True)
        fname = f"{i:03d}.ppm"
        write_ppm(out / "images" / fname, pixels)
        manifest.append({"file": fname, **meta})
        inputs.append(to_input(pixels))
    (out / "images.json").write_text(json.dumps(manifest, indent=1) + "\n")

    reference = {"inputs": [m["file"] for m in manifest[:16]]}
    batch = torch.tensor(np.stack(inputs[:16]), dtype=torch.float64)
    for name, model in models.items():
        # Same float32 weights, evaluated in float64.
        with torch.no_grad():
            logits = model.double()(batch).numpy()
        reference[name] = [[float(v) for v in row] for row in logits]
    (out / "reference.json").write_text(json.dumps(reference, indent=1) + "\n")


if __name__ == "__main__":
    main()
