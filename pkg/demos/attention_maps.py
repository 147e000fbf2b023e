# Visualize what the CLS token attends to.
#
# After self-supervised pretraining the last-layer CLS attention
# concentrates on the injected "lesions" of the synthetic images. This
# script trains with the same desk-scale recipe as the evaluation demo,
# then writes one grayscale heatmap per attention head for a grade-4
# image, plus the raw image for comparison. About three minutes.

import os

import numpy as np

from retinassl.crops import MultiCropConfig
from retinassl.data import generate_synthetic_dataset
from retinassl.distill import DistillConfig, init_train_state, train_loop
from retinassl.evaluation import attention_heatmaps
from retinassl.imagecodec import encode_image
from retinassl.vit import ProjectionHeadConfig, ViTConfig

out_dir = "attention_demo_out"
os.makedirs(out_dir, exist_ok=True)

S = 48
dataset = generate_synthetic_dataset(seed=0, n_per_class=100, image_size=S)

vit = ViTConfig(image_size=S, patch_size=8, depth=2, embed_dim=32, n_heads=4,
                drop_path_rate=0.1)
head = ProjectionHeadConfig(hidden_dim=64, bottleneck_dim=16, output_dim=256)
crop = MultiCropConfig(global_out_size=S, local_out_size=24,
                       global_scale_range=(0.5, 1.0),
                       local_scale_range=(0.2, 0.5), n_local=4,
                       jitter_strength=(0.3, 0.3, 0.2, 0.05),
                       grayscale_p=0.1, blur_sigma=(0.1, 0.5), solarize_p=0.1)
distill = DistillConfig(batch_size=16, total_epochs=130, warmup_epochs=4,
                        base_lr=0.01, tau_t=0.05, center_momentum=0.7,
                        wd_start=0.0001, wd_end=0.0001,
                        freeze_last_steps=10 ** 9)

state = init_train_state(vit, head, seed=0, init_std=0.05)
train_loop(dataset.images, state, vit, head, crop, distill, n_steps=1000)
print("pretraining done")

# pick the first grade-4 image; it has the most lesions
idx = int(np.where(dataset.grades == 4)[0][0])
image = dataset.images[idx]
encode_image(os.path.join(out_dir, "input.png"), image)

maps = attention_heatmaps(state.teacher, image, vit)  # (heads, cls, H, W)
for h in range(vit.n_heads):
    for c in range(vit.n_cls_tokens):
        name = f"head{h}_cls{c}.png"
        encode_image(os.path.join(out_dir, name), maps[h, c])

# quick numeric sanity check: how much of the top-decile attention mass
# lands on actual lesion pixels vs the lesion area fraction
mask = dataset.blob_masks[idx]
combined = maps.mean(axis=(0, 1))
thresh = np.quantile(combined, 0.9)
top = combined >= thresh
overlap = (top & mask).sum() / max(top.sum(), 1)
print(f"lesion fraction of image: {mask.mean():.3f}")
print(f"lesion fraction of top-decile attention: {overlap:.3f}")
print(f"heatmaps written to {out_dir}/")
