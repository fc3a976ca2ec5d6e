"""Write a reference U-Net forward pass for the Rust parity test.

Builds the network with PyTorch using the weight naming grammar of the
refiner, draws random weights and batch-norm statistics, and stores

  <out>/parity_weights.drum   weight archive (with the `arch` descriptor)
  <out>/parity_dump.drum      input, per-block activations, output,
                              and the trainable parameter count

Usage: python tools/parity_fixture.py [out_dir] [--base 4] [--size 32]
"""

import argparse
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"DRUMTNSR"
VERSION = 1


def write_archive(path, entries):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            if arr.ndim == 0:
                arr = arr.reshape(1)
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BI", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


class Block(nn.Module):
    def __init__(self, cin, c):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, c, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c)

    def forward(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(x)))


class Up(Block):
    def __init__(self, c):
        super().__init__(2 * c, c)
        self.up = nn.ConvTranspose2d(2 * c, c, 2, stride=2)

    def forward(self, x, skip):
        return super().forward(torch.cat([skip, self.up(x)], dim=1))


class UNet(nn.Module):
    def __init__(self, levels, base, cin, cout, dropout):
        super().__init__()
        self.levels = levels
        ch = cin
        for i in range(levels):
            setattr(self, f"enc{i}", Block(ch, base << i))
            ch = base << i
        self.bottleneck = Block(ch, base << levels)
        self.drop = nn.Dropout(dropout)
        for i in range(levels):
            setattr(self, f"dec{i}", Up(base << i))
        self.out = nn.Conv2d(base, cout, 1)

    def forward(self, x, trace):
        skips = []
        for i in range(self.levels):
            x = getattr(self, f"enc{i}")(x)
            trace.append((f"enc{i}", x))
            skips.append(x)
            x = nn.functional.max_pool2d(x, 2)
        x = self.drop(self.bottleneck(x))
        trace.append(("bottleneck", x))
        for i in reversed(range(self.levels)):
            x = getattr(self, f"dec{i}")(x, skips.pop())
            trace.append((f"dec{i}", x))
        x = self.out(x)
        trace.append(("output", x))
        return x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="crates/core/tests/fixtures")
    ap.add_argument("--levels", type=int, default=4)
    ap.add_argument("--base", type=int, default=4)
    ap.add_argument("--channels", type=int, default=6)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    net = UNet(args.levels, args.base, args.channels, args.channels, 0.5).double()
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.weight.uniform_(0.5, 1.5)
                m.bias.uniform_(-0.2, 0.2)
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
    net.eval()

    # weights are stored as real32; run the reference on the rounded values
    state = {
        k: v.float().double()
        for k, v in net.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    net.load_state_dict(state, strict=False)

    x = torch.randn(1, args.channels, args.size, args.size, dtype=torch.float64)
    x = x.float().double()
    trace = []
    with torch.no_grad():
        net(x, trace)

    desc = [1, args.levels, args.base, args.channels, args.channels, 0.5]
    weights = [("arch", np.array(desc))] + [(k, v.numpy()) for k, v in state.items()]
    count = sum(p.numel() for p in net.parameters())
    dump = [("input", x[0].numpy()), ("param_count", np.array([count]))]
    dump += [(name, a[0].numpy()) for name, a in trace]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_archive(out / "parity_weights.drum", weights)
    write_archive(out / "parity_dump.drum", dump)
    print(f"{count} trainable parameters; output max |y| = {trace[-1][1].abs().max():.4f}")


if __name__ == "__main__":
    main()
