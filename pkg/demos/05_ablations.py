"""Decoder variants and the GELU clamp ablation."""

from isegmenter import TOY_CONFIGS, calibrate
from isegmenter.reports import ABLATE_COLUMNS, COMPARE_COLUMNS, ablate_gelu_rows, compare_rows, format_csv
from isegmenter.synth import structured_checkpoint, synth_dataset

cfg = TOY_CONFIGS["d32-l4-k4"]
data = synth_dataset(12, cfg.K, cfg.image_h, seed=31)
fp = structured_checkpoint(cfg, data[:8], seed=31)
held = data[8:]
ic = calibrate(fp, [data[0][0]])

# model a is evaluated with each decoder variant; the INT model keeps its fixed graph
print(format_csv(compare_rows(fp, ic, held), COMPARE_COLUMNS))

# lambda=1 is the ShiftGELU baseline; a wider clamp follows the tail of the negative lobe
rows = ablate_gelu_rows(fp, [data[0][0]], [img for img, _ in held], lambdas=(1, 2, 4, 6), name="d32-l4-k4")
print(format_csv(rows, ABLATE_COLUMNS))
