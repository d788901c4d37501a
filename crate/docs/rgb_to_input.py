#!/usr/bin/env python3
"""Convert raw interleaved RGB bytes (H x W x 3, u8) into an inference input file.

usage: rgb_to_input.py WIDTH HEIGHT IN.rgb OUT.mfck
"""
import json
import struct
import sys


def encode_input(width, height, rgb):
    if len(rgb) != width * height * 3:
        sys.exit(f"expected {width * height * 3} bytes, got {len(rgb)}")
    # HWC u8 -> CHW f32 in [0, 1]
    planar = [rgb[(y * width + x) * 3 + c] / 255.0
              for c in range(3) for y in range(height) for x in range(width)]
    payload = struct.pack(f"<{len(planar)}f", *planar)
    manifest = json.dumps(
        {
            "config": None,
            "tensors": [{
                "name": "input",
                "shape": [1, 3, height, width],
                "dtype": "f32",
                "frozen": False,
                "offset": 0,
                "byte_len": len(payload),
            }],
        },
        separators=(",", ":"),
    ).encode("utf-8")
    return b"MFCK" + struct.pack("<IQ", 1, len(manifest)) + manifest + payload


if __name__ == "__main__":
    if len(sys.argv) != 5:
        sys.exit(__doc__)
    w, h = int(sys.argv[1]), int(sys.argv[2])
    with open(sys.argv[3], "rb") as f:
        data = f.read()
    with open(sys.argv[4], "wb") as f:
        f.write(encode_input(w, h, data))
