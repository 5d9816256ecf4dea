"""Regenerate the frozen prediction record used by the golden test.

Run from the repository root after any intentional change to the forward
pass, then review the diff:

    python scripts/regen_golden_record.py
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from cfdebug.model import ClassifierHandle, MaskableCNN

GOLDEN_NET_SEED = 123
GOLDEN_IMAGE_SEED = 456


def golden_setup() -> tuple[ClassifierHandle, torch.Tensor]:
    torch.manual_seed(GOLDEN_NET_SEED)
    net = MaskableCNN(label_count=5, filter_count=8, widths=(8,), in_channels=3, image_size=8)
    image = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(GOLDEN_IMAGE_SEED))
    return ClassifierHandle(net), image


def main() -> None:
    handle, image = golden_setup()
    record = handle.predict(image, image_id="golden")
    out = Path(__file__).resolve().parents[1] / "tests" / "golden" / "golden_record.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(record.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
