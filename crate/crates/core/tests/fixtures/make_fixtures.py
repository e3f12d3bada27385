"""Writes the sample KITTI labels and the matching PRIOFEAT feature file.

Independent of the Rust code: the binary layout is produced with `struct`
from the format description (magic, u32 version, u32 dim, u64 count, then
u64 key + dim little-endian f32 per record).
"""
import os
import random
import struct

HERE = os.path.dirname(os.path.abspath(__file__))
LABELS = os.path.join(HERE, "kitti")
DIM = 4
SIZES = {
    "Car": [(1.52, 1.62, 3.90), (2.05, 1.90, 5.10)],
    "Pedestrian": [(1.76, 0.66, 0.84)],
    "Cyclist": [(1.74, 0.60, 1.76)],
    "Van": [(2.20, 1.90, 5.00)],
}
DIRS = {"Car": [1, 0, 0, 0], "Pedestrian": [0, 1, 0, 0], "Cyclist": [0, 0, 1, 0], "Van": [0, 0, 0, 1]}


def line(rng, cls, mode):
    h, w, l = (v * (1 + rng.gauss(0, 0.04)) for v in SIZES[cls][mode])
    trunc = rng.choice([0.0, 0.0, 0.0, 0.2, 0.7])
    occ = rng.choice([0, 0, 1, 1, 2])
    top = rng.uniform(150, 200)
    height = rng.choice([60.0, 45.0, 30.0, 18.0])
    left = rng.uniform(0, 1000)
    fields = [cls, f"{trunc:.2f}", str(occ), f"{rng.uniform(-3, 3):.2f}",
              f"{left:.2f}", f"{top:.2f}", f"{left + 50:.2f}", f"{top + height:.2f}",
              f"{h:.2f}", f"{w:.2f}", f"{l:.2f}",
              f"{rng.uniform(-10, 10):.2f}", f"{rng.uniform(1, 2):.2f}", f"{rng.uniform(5, 50):.2f}",
              f"{rng.uniform(-3, 3):.2f}"]
    return " ".join(fields)


def main():
    rng = random.Random(20240601)
    os.makedirs(LABELS, exist_ok=True)
    records = []
    for frame in range(20):
        lines = []
        for i in range(40):
            r = rng.random()
            if r < 0.06:
                lines.append("DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10")
                continue
            cls = "Car" if r < 0.5 else "Pedestrian" if r < 0.72 else "Cyclist" if r < 0.94 else "Van"
            mode = rng.randrange(len(SIZES[cls]))
            lines.append(line(rng, cls, mode))
            key = frame * 1000 + len(lines) - 1
            feat = [d + 0.5 * mode + rng.gauss(0, 0.1) for d in DIRS[cls]]
            records.append((key, feat))
        with open(os.path.join(LABELS, f"{frame:06d}.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
    with open(os.path.join(HERE, "features.bin"), "wb") as f:
        f.write(b"PRIOFEAT")
        f.write(struct.pack("<IIQ", 1, DIM, len(records)))
        for key, feat in records:
            f.write(struct.pack("<Q", key))
            f.write(struct.pack(f"<{DIM}f", *feat))


if __name__ == "__main__":
    main()
