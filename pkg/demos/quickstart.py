"""Simulate a small dataset, train a matcher, track, score and plot.

Run with ``python3 demos/quickstart.py [OUT_DIR]``; everything lands in
OUT_DIR (a temporary directory by default) and takes well under a minute.
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from sfmtrack import metrics, pipeline, report
from sfmtrack.dataset import dataset_stats
from sfmtrack.matcher import TrainConfig

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sfmtrack_"))
out.mkdir(parents=True, exist_ok=True)

# %% A handful of short sequences: a 10 px target among four look-alike distractors.
template = replace(pipeline.STANDARD_SIM, num_frames=60)
seqs = pipeline.generate(template, count=8, seed=0)
train_seqs, test_seqs = pipeline.split(seqs)
st = dataset_stats([s.sequence for s in seqs])
print(f"{st.num_sequences} sequences, mean target area {st.avg_target_size:.1f} px^2, "
      f"mean relative speed {st.avg_relative_speed:.2f}")

# %% Train two matchers: one mixing in low-level features, one using high-level only.
quick = TrainConfig(steps=150, batch_size=8, lr=3e-3)
trackers = {}
for label, omega in [("mixed (omega=0.2)", 0.2), ("high only (omega=1.0)", 1.0)]:
    params, mcfg, history = pipeline.train(train_seqs, omega, seed=0, train_cfg=quick)
    print(f"{label}: loss {history[0]:.3f} -> {history[-1]:.3f}")
    trackers[label] = pipeline.track_all(test_seqs, params, mcfg)

# %% Score with one-pass evaluation and rank by AUC.
evals = {label: pipeline.evaluate_tracks(test_seqs, tracks) for label, tracks in trackers.items()}
for label in metrics.rank(evals, "auc"):
    ev = evals[label]
    print(f"{label:24s} PRC {ev.prc:.3f}  AUC {ev.auc:.3f}")

# %% Precision and success plots as standalone SVG files.
for name, text in report.render(evals).items():
    (out / name).write_text(text)
print(f"plots written to {out}")
