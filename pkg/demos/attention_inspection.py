"""Where does the MIL classifier look?

Loads the fold checkpoints written by ``desk_experiment.py``, runs both stages
on a few held-out malignant phantoms and saves a figure with the detected
boxes and the patches ranked by attention weight.

    python demos/attention_inspection.py --run runs/desk
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from mammomil.data import load_manifest  # noqa: E402
from mammomil.experiment import DESK, bag_rng  # noqa: E402
from mammomil.locnet import load_locnet, locnet_forward  # noqa: E402
from mammomil.mil import classify_bag, load_mil  # noqa: E402
from mammomil.patches import build_bag  # noqa: E402
from mammomil.postprocess import detect  # noqa: E402
from mammomil.preprocess import preprocess_sample  # noqa: E402


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", default="runs/desk")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--n", type=int, default=3, help="malignant test images to show")
    args = p.parse_args()

    run = Path(args.run)
    fold_dir = run / f"fold{args.fold}"
    folds = json.loads((fold_dir / "folds.json").read_text())
    test_subjects = set(folds[args.fold]["test_subjects"])
    manifest = load_manifest(run / "data")
    chosen = [r for r in manifest.samples if r.subject_id in test_subjects and r.label == 1][: args.n]

    locnet = load_locnet(fold_dir / "stage1").model
    mil = load_mil(fold_dir / "stage2").model
    fig, axes = plt.subplots(len(chosen), 6, figsize=(12, 3.2 * len(chosen)), squeeze=False)
    for row, rec in zip(axes, chosen):
        sample = preprocess_sample(rec.load())
        boxes = detect(locnet_forward(sample.image, locnet), DESK.postprocess)
        bag = build_bag(sample, boxes, bag_rng(0, rec.image_id))
        out = classify_bag(bag, mil)
        row[0].imshow(sample.image, cmap="gray")
        for b in boxes:
            row[0].add_patch(Rectangle((b.x_min, b.y_min), b.x_max - b.x_min, b.y_max - b.y_min,
                                       fill=False, color="orange"))
        for g in sample.gt_boxes:
            row[0].add_patch(Rectangle((g.x_min, g.y_min), g.x_max - g.x_min, g.y_max - g.y_min,
                                       fill=False, color="lime", linestyle="--"))
        row[0].set_title(f"{rec.image_id}  p={out.probability:.2f}", fontsize=8)
        order = out.weights.argsort()[::-1][:5]
        for ax, i in zip(row[1:], order):
            ax.imshow(bag.patches[i], cmap="gray")
            ax.set_title(f"alpha={out.weights[i]:.2f}", fontsize=8)
        for ax in row:
            ax.axis("off")
    fig.tight_layout()
    path = run / "attention.png"
    fig.savefig(path, dpi=110)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
