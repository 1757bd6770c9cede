#!/usr/bin/env python3
"""Regenerate the MNIST test fixture used by the core crate's acceptance suite.

Input: the 10,000-digit MNIST subset shipped in the `mnist` npm package
(`npm pack mnist && tar xzf mnist-*.tgz`). The last 100 digits of each class
become a 1,000-sample IDX test set; everything else trains a 784-64-10 MLP
with 4-bit symmetric per-channel weights and int8 activations.

Outputs (in --out-dir):
  mnist-test-images.idx3-ubyte, mnist-test-labels.idx1-ubyte
  mnist-mlp-4bit.json   model file in the simulator's JSON format
  mnist-mlp-4bit.eval.json   int8 accuracy of the exported model

The int8 evaluation below uses the simulator's requantization rule:
round half away from zero on acc * scale, then clamp to int8.
"""
import argparse
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

HIDDEN = 64
TEST_PER_CLASS = 100


def load_npm_digits(npm_dir):
    xs, ys = [], []
    for d in range(10):
        with open(os.path.join(npm_dir, "src", "digits", f"{d}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        imgs = np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8).reshape(-1, 784)
        xs.append(imgs)
        ys.append(np.full(len(imgs), d, dtype=np.uint8))
    return xs, ys


def write_idx(out_dir, images, labels):
    with open(os.path.join(out_dir, "mnist-test-images.idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(os.path.join(out_dir, "mnist-test-labels.idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


class Ste(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, g):
        return g


def fake_quant_weight(w):
    scale = w.abs().amax(dim=1, keepdim=True).clamp_min(1e-8) / 7.0
    q = torch.clamp(Ste.apply(w / scale), -8, 7)
    return q * scale, scale.squeeze(1)


def fake_quant_act(x, lo, hi):
    scale = max(hi - lo, 1e-8) / 255.0
    zp = round(-128 - lo / scale)
    q = torch.clamp(Ste.apply(x / scale) + zp, -128, 127)
    return (q - zp) * scale


class Mlp(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(784, HIDDEN)
        self.fc2 = nn.Linear(HIDDEN, 10)
        self.qat = False
        self.register_buffer("h_hi", torch.tensor(1.0))
        self.register_buffer("o_lo", torch.tensor(-1.0))
        self.register_buffer("o_hi", torch.tensor(1.0))

    def forward(self, x):
        if not self.qat:
            h = F.relu(self.fc1(x))
            return self.fc2(h)
        w1, _ = fake_quant_weight(self.fc1.weight)
        h = F.relu(F.linear(x, w1, self.fc1.bias))
        if self.training:
            self.h_hi.mul_(0.9).add_(0.1 * h.detach().max())
        h = fake_quant_act(h, 0.0, float(self.h_hi))
        w2, _ = fake_quant_weight(self.fc2.weight)
        o = F.linear(h, w2, self.fc2.bias)
        if self.training:
            self.o_lo.mul_(0.9).add_(0.1 * o.detach().min())
            self.o_hi.mul_(0.9).add_(0.1 * o.detach().max())
        return fake_quant_act(o, float(self.o_lo), float(self.o_hi))


def quantize_input(pixels):
    # input scale 1/255, zero point -128  =>  q = pixel - 128
    return pixels.astype(np.int64) - 128


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def export(model):
    layers = []
    in_scale, in_zp = 1.0 / 255.0, -128
    specs = [
        (model.fc1, 0.0, float(model.h_hi), "relu"),
        (model.fc2, float(model.o_lo), float(model.o_hi), "none"),
    ]
    for fc, lo, hi, act in specs:
        w = fc.weight.detach().double()
        w_scale = (w.abs().amax(dim=1).clamp_min(1e-8) / 7.0).numpy()
        wq = np.clip(np.rint(w.numpy() / w_scale[:, None]), -8, 7).astype(np.int64)
        out_scale = max(hi - lo, 1e-8) / 255.0
        out_zp = int(round(-128 - lo / out_scale))
        out_zp = max(-128, min(127, out_zp))
        bias = np.rint(fc.bias.detach().double().numpy() / (in_scale * w_scale)).astype(np.int64)
        layers.append(
            {
                "in": int(w.shape[1]),
                "out": int(w.shape[0]),
                "weights": wq.reshape(-1).tolist(),
                "bias": bias.tolist(),
                "input_scale": in_scale,
                "input_zp": in_zp,
                "requant_scales": (in_scale * w_scale / out_scale).tolist(),
                "output_scale": out_scale,
                "output_zp": out_zp,
                "activation": act,
            }
        )
        in_scale, in_zp = out_scale, out_zp
    return {"name": "mnist-mlp-784-64-10", "task": "classify", "layers": layers}


def int8_forward(doc, x_q):
    x = x_q
    for layer in doc["layers"]:
        w = np.asarray(layer["weights"], dtype=np.int64).reshape(layer["out"], layer["in"])
        acc = (x - layer["input_zp"]) @ w.T + np.asarray(layer["bias"], dtype=np.int64)
        y = layer["output_zp"] + round_half_away(acc * np.asarray(layer["requant_scales"]))
        y = np.clip(y, -128, 127).astype(np.int64)
        if layer["activation"] == "relu":
            y = np.maximum(y, layer["output_zp"])
        x = y
    return x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--npm-dir", required=True)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    xs, ys = load_npm_digits(args.npm_dir)
    test_x = np.concatenate([x[-TEST_PER_CLASS:] for x in xs])
    test_y = np.concatenate([y[-TEST_PER_CLASS:] for y in ys])
    train_x = np.concatenate([x[:-TEST_PER_CLASS] for x in xs])
    train_y = np.concatenate([y[:-TEST_PER_CLASS] for y in ys])
    perm = rng.permutation(len(test_x))
    test_x, test_y = test_x[perm], test_y[perm]
    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(args.out_dir, test_x, test_y)

    xt = torch.tensor(train_x, dtype=torch.float32) / 255.0
    yt = torch.tensor(train_y, dtype=torch.long)
    model = Mlp()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for epoch in range(30):
        if epoch == 15:
            model.qat = True
            for g in opt.param_groups:
                g["lr"] = 3e-4
        model.train()
        order = torch.randperm(len(xt))
        for i in range(0, len(xt), 64):
            idx = order[i : i + 64]
            loss = F.cross_entropy(model(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    doc = export(model)
    pred = int8_forward(doc, quantize_input(test_x)).argmax(axis=1)
    acc = float((pred == test_y).mean())
    with open(os.path.join(args.out_dir, "mnist-mlp-4bit.json"), "w") as f:
        json.dump(doc, f, separators=(",", ":"))
    with open(os.path.join(args.out_dir, "mnist-mlp-4bit.eval.json"), "w") as f:
        json.dump({"samples": int(len(test_y)), "int8_accuracy": acc}, f, indent=2)
    print(f"int8 test accuracy: {acc:.4f}")


if __name__ == "__main__":
    main()
