#!/usr/bin/env python3
"""Export the CLIP ViT-B/32 image tower into the vcdm checkpoint format.

The output file is what VCDM_CLIP_WEIGHTS (or embedder.backend = clip_vit_b32)
expects: the "visual.*" tensors of the OpenAI checkpoint stored as float64.

    python3 tools/export_clip_weights.py --out clip_vit_b32.ckpt
    python3 tools/export_clip_weights.py --state-dict ViT-B-32.pt --out clip.ckpt

Needs torch, plus the `clip` package when --state-dict is not given.
"""

import argparse
import json
import struct
import sys

import numpy as np

MAGIC = b"VCDMCKPT"
VERSION = 1


def load_visual_state(path):
    import torch

    if path:
        obj = torch.jit.load(path, map_location="cpu") if path.endswith(".pt") else torch.load(path, map_location="cpu")
        state = obj.state_dict() if hasattr(obj, "state_dict") else obj
    else:
        import clip  # https://github.com/openai/CLIP

        model, _ = clip.load("ViT-B/32", device="cpu", jit=False)
        state = model.state_dict()
    visual = {k: v for k, v in state.items() if k.startswith("visual.")}
    if not visual:
        sys.exit("no visual.* tensors found; is this a CLIP checkpoint?")
    return visual


def write_checkpoint(tensors, out_path, meta):
    names = sorted(tensors)  # matches the std::map order used by the reader
    header = {"meta": meta, "tensors": []}
    offset = 0
    blobs = []
    for name in names:
        t = tensors[name]
        if hasattr(t, "detach"):
            t = t.detach().cpu().double().numpy()
        t = np.ascontiguousarray(t, dtype="<f8")
        header["tensors"].append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
        blobs.append(t.tobytes())
    text = json.dumps(header, separators=(",", ":")).encode()
    with open(out_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--state-dict", default="", help="local CLIP checkpoint (.pt JIT archive or state dict)")
    ap.add_argument("--out", required=True, help="output .ckpt path")
    args = ap.parse_args()

    visual = load_visual_state(args.state_dict)
    write_checkpoint(visual, args.out, {"kind": "clip_vit_b32", "source": args.state_dict or "clip:ViT-B/32"})
    print(f"wrote {len(visual)} tensors to {args.out}")


if __name__ == "__main__":
    main()
