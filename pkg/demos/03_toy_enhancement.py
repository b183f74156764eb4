"""
Toy unpaired enhancement, end to end
====================================

Synthesize fundus-like images, train a small model for a few epochs,
then score the enhanced held-out images against their clean originals.
A few minutes on one core; raise EPOCHS for better numbers.
"""

import tempfile
from pathlib import Path

from fundusgan import Checkpoint, Enhancer, QualityReport, TrainConfig, psnr, read_ppm, ssim, train
from fundusgan.data import list_images, write_synthetic_dataset

EPOCHS = 3
root = Path(tempfile.mkdtemp())

# train/ feeds the unpaired sampler, heldout/ is only used for scoring
write_synthetic_dataset(root / "train", 40, 64, seed=1)
write_synthetic_dataset(root / "heldout", 10, 64, seed=2)

cfg = TrainConfig(image_size=64, embed_dim=128, depth=2, heads=4, disc_base=8,
                  epochs_max=EPOCHS, low_dir=str(root / "train" / "low"),
                  high_dir=str(root / "train" / "high"), checkpoint_dir=str(root / "ck"))
result = train(cfg, log=print)
print("best epoch", result.best_epoch, "loss", result.best_loss)

enhance = Enhancer(Checkpoint.load(result.best_path))
before, after = QualityReport(), QualityReport()
for cp, dp in zip(list_images(root / "heldout" / "clean"), list_images(root / "heldout" / "degraded")):
    clean, bad = read_ppm(cp).pixels, read_ppm(dp).pixels
    out = enhance(bad)
    before.add(cp.name, psnr(bad, clean), ssim(bad, clean))
    after.add(cp.name, psnr(out, clean), ssim(out, clean))

print(f"degraded  PSNR {before.mean_psnr:.2f} dB  SSIM {before.mean_ssim:.3f}")
print(f"enhanced  PSNR {after.mean_psnr:.2f} dB  SSIM {after.mean_ssim:.3f}")
