"""
Segmenting an image and scoring label maps
==========================================

No trained weights ship with the package, so the predictions below are
meaningless; the point is the plumbing: PPM in, colorized PPM out, mIoU
over label maps.
"""
import tempfile
from pathlib import Path

import numpy as np

from ffnet import ModelConfig, build_model, init_random, render_config, save_weights
from ffnet.cli import main
from ffnet.segtool import Image, colorize, miou, read_image, write_image

work = Path(tempfile.mkdtemp())

# a synthetic street scene: sky on top, road at the bottom
img = np.zeros((128, 256, 3), np.uint8)
img[:48] = (70, 130, 180)
img[48:90] = (120, 120, 120)
img[90:] = (128, 64, 128)
write_image(work / "scene.ppm", Image(img))

cfg = ModelConfig("resnet22s", "C", "C", "C", input_hw=(128, 256))
(work / "model.cfg").write_text(render_config(cfg))
save_weights(init_random(build_model(cfg), seed=1), work / "weights.ffnw")

main(["segment", "--config", str(work / "model.cfg"), "--weights", str(work / "weights.ffnw"),
      "--image", str(work / "scene.ppm"), "--out", str(work / "pred.ppm"),
      "--classmap", str(work / "pred.pgm")])
pred = read_image(work / "pred.pgm").pixels
print("predicted classes:", np.unique(pred))

# the ground truth the scene was drawn from (train ids: 10 sky, 2 building, 0 road)
gt = np.full(pred.shape, 255, np.uint8)
gt[:48], gt[48:90], gt[90:] = 10, 2, 0
iou, mean = miou(pred, gt, 19)
print(f"random-weight mIoU {mean:.3f}")

# a perfect prediction for comparison, and what colorize makes of it
iou, mean = miou(gt, gt, 19)
print(f"perfect mIoU {mean:.3f} over {int((~np.isnan(iou)).sum())} present classes")
write_image(work / "gt.ppm", colorize(gt))
print("files in", work, sorted(p.name for p in work.iterdir()))
