"""
Detecting actions in synthetic video
====================================

A short training run on a small version of the easy synthetic set, then
evaluation and a look at individual detections.  The full-size run is
``estf-tad train --out runs/easy``.
"""

from dataclasses import replace


from estf_tad.config import preset
from estf_tad.metrics import evaluate
from estf_tad.pipeline import load_datasets, run_training, validation_predictions

# %% Start from the bundled easy preset and shrink it.
cfg = preset("easy")
cfg = replace(
    cfg,
    data=replace(cfg.data, train=replace(cfg.data.train, n_videos=24), val_videos=8),
    train=replace(cfg.train, epochs=10, warmup_epochs=2),
)
data = load_datasets(cfg)
videos, annos = data.train
print(len(videos), "training videos of shape", videos[0].shape)
print("first video's actions:", [(g.t_start, g.t_end, annos.labels[g.label]) for g in annos.videos[0].instances])

# %% Train. Only the adapters and the head move; the backbone stays frozen.
model, result = run_training(cfg, data, on_epoch=lambda r: print(f"epoch {r.epoch:2d}  cls {r.loss_cls:.3f}  reg {r.loss_reg:.3f}  mAP {r.mAP:.3f}"))

# %% Score the validation split.
preds = validation_predictions(model, cfg, data)
report = evaluate(preds, data.val[1])
print(report.format_table())

# %% The three most confident detections in the first validation video.
first = data.val[1].videos[0]
mine = sorted((p for p in preds if p.video == first.id), key=lambda p: -p.score)[:3]
print("ground truth:", [(g.t_start, g.t_end, data.val[1].labels[g.label]) for g in first.instances])
for p in mine:
    print(f"  {data.val[1].labels[p.label]:<8} {p.t_start:6.2f}s - {p.t_end:6.2f}s  score {p.score:.3f}")
