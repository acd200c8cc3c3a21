#!/usr/bin/env python3
"""Train and quantize the bundled victim (64 -> 32 -> 16 -> 10 bias-free MLP).

Uses the 8x8 handwritten digits shipped with scikit-learn (1797 images, 10
classes). Writes model.bin, digits_{train,test}.bin and manifest.txt into
src/dramlocker/data/. Only needed to regenerate the fixture.
"""

import argparse
import hashlib
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

from dramlocker.victim import Dataset, Layer, QuantizedModel, evaluate, save_model

DATA = Path(__file__).resolve().parents[1] / "src" / "dramlocker" / "data"
DIMS = [64, 32, 16, 10]


def train(x, y, seed, epochs, lr, batch):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(0.0, np.sqrt(2.0 / i), size=(i, o)) for i, o in zip(DIMS, DIMS[1:])]
    m = [np.zeros_like(w) for w in ws]
    v = [np.zeros_like(w) for w in ws]
    b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
    onehot = np.eye(10)[y]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            acts = [x[idx]]
            for k, w in enumerate(ws):
                z = acts[-1] @ w
                acts.append(np.maximum(z, 0) if k < len(ws) - 1 else z)
            logits = acts[-1]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            grad = (p - onehot[idx]) / len(idx)
            grads = [None] * len(ws)
            for k in reversed(range(len(ws))):
                grads[k] = acts[k].T @ grad
                if k:
                    grad = (grad @ ws[k].T) * (acts[k] > 0)
            t += 1
            for k, g in enumerate(grads):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh, vh = m[k] / (1 - b1 ** t), v[k] / (1 - b2 ** t)
                ws[k] -= lr * mh / (np.sqrt(vh) + eps)
    return ws


def quantize(ws):
    layers = []
    for k, w in enumerate(ws):
        scale = float(np.abs(w).max() / 127.0)
        q = np.clip(np.round(w / scale), -128, 127).astype(np.int8)
        layers.append(Layer(q, scale, "relu" if k < len(ws) - 1 else "identity"))
    return QuantizedModel(layers)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()

    digits = load_digits()
    pixels = digits.data.astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    idx_tr, idx_te = train_test_split(np.arange(len(labels)), test_size=0.25,
                                      stratify=labels, random_state=args.seed)
    train_set = Dataset(labels[idx_tr], pixels[idx_tr])
    test_set = Dataset(labels[idx_te], pixels[idx_te])

    ws = train(train_set.features, train_set.labels, args.seed, args.epochs, args.lr, args.batch)
    model = quantize(ws)
    acc_test = evaluate(model, test_set, sample_size=None)
    acc_train = evaluate(model, train_set, sample_size=None)
    acc_128 = evaluate(model, test_set, sample_size=128, seed=0)

    args.out.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out / "model.bin")
    (args.out / "digits_train.bin").write_bytes(train_set.to_bytes())
    (args.out / "digits_test.bin").write_bytes(test_set.to_bytes())
    sha = hashlib.sha256((args.out / "model.bin").read_bytes()).hexdigest()
    manifest = f"""\
# bundled victim fixture; regenerate with scripts/make_fixture.py
source: sklearn.datasets.load_digits (8x8 grayscale, pixel range 0..16)
split: train_test_split(test_size=0.25, stratify=labels, random_state={args.seed})
n_train: {len(train_set)}
n_test: {len(test_set)}
architecture: {'-'.join(map(str, DIMS))} relu, no bias, per-layer symmetric int8
training: numpy adam lr={args.lr} batch={args.batch} epochs={args.epochs} seed={args.seed}
model_sha256: {sha}
clean_accuracy_test: {acc_test:.6f}
clean_accuracy_test_sample128_seed0: {acc_128:.6f}
clean_accuracy_train: {acc_train:.6f}
"""
    (args.out / "manifest.txt").write_text(manifest)
    print(manifest)


if __name__ == "__main__":
    main()
