"""Reproduce the headline numbers: train both conditioning variants, then run
the interactive protocol on held-out phantoms and a click-budget sweep.

Writes results/protocol.json. Checkpoints are cached under .cache/, so a
second run only re-evaluates.
"""

import json
import time
from pathlib import Path

from exemseg.experiments import (budget_sweep, default_experiment,
                                 evaluate_protocol, make_datasets, train_cached)

out_dir = Path(__file__).parents[1] / "results"
out_dir.mkdir(exist_ok=True)
results = {}

for tag, shared in (("dedicated", False), ("shared", True)):
    cfg = default_experiment(shared_conditioning=shared)
    t0 = time.time()
    model, ckpt = train_cached(cfg, tag=tag)
    print(f"{tag}: trained/loaded in {(time.time() - t0) / 60:.1f} min ({ckpt})")
    _, _, test = make_datasets(cfg)
    res = evaluate_protocol(model, test, lesion_budget=3, click_budget=1)
    print(f"  L=3 C=1: median DSC {res.median_dsc:.3f}, "
          f"unprompted F1 {res.median_unprompted_f1:.3f}, "
          f"distractor share {res.distractor_fraction:.3f}")
    results[tag] = {"protocol": res.summary(), "checkpoint": str(ckpt)}
    if not shared:
        sweep = budget_sweep(model, test, budgets=[1, 2, 3, 4, 5], click_budget=1)
        stage1 = budget_sweep(model, test, budgets=[1, 2, 3, 4, 5], click_budget=1,
                              use_semantic=False)
        results[tag]["lesion_budget_sweep"] = {
            b: {"full": sweep[b].median_dsc, "stage1_only": stage1[b].median_dsc}
            for b in sweep}
        clicks = {c: evaluate_protocol(model, test, 3, c).median_dsc for c in (1, 3, 5)}
        results[tag]["click_budget_dsc"] = clicks
        print("  lesion sweep (full vs stage-1):",
              {b: (round(v["full"], 3), round(v["stage1_only"], 3))
               for b, v in results[tag]["lesion_budget_sweep"].items()})
        print("  click budget DSC:", {c: round(v, 3) for c, v in clicks.items()})

(out_dir / "protocol.json").write_text(json.dumps(results, indent=1))
print(f"wrote {out_dir / 'protocol.json'}")
