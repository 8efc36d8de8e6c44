"""End-to-end experiment protocol shared by the scripts and the test suite.

The protocol: generate a phantom corpus, train a model variant on the
training split, then run the lesion-wise interactive evaluation on held-out
phantoms at chosen lesion/click budgets. Aggregates are medians across
phantoms. Trained checkpoints are cached on disk keyed by a hash of the
full experiment configuration, so repeated runs are instant.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from exemseg.evaluation import EvalConfig, EvalReport, run_lesionwise_eval
from exemseg.inference import SessionSegmenter
from exemseg.model import ModelConfig, SliceSegmenter
from exemseg.phantom import Phantom, PhantomConfig, generate_dataset
from exemseg.training import TrainConfig, train

TEST_SEED0 = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    # test phantoms carry at least one extra lesion beyond the prompt budget
    # so the unprompted-recall score is always defined
    test_phantom: PhantomConfig = field(
        default_factory=lambda: PhantomConfig(lesion_count=(4, 6)))
    n_train: int = 40
    n_val: int = 4
    n_test: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)


def default_experiment(shared_conditioning: bool = False, seed: int = 0,
                       epochs: int = 60) -> ExperimentConfig:
    model = ModelConfig(shared_conditioning=shared_conditioning, seed=seed)
    return ExperimentConfig(train=TrainConfig(model=model, epochs=epochs, seed=seed))


def make_datasets(cfg: ExperimentConfig) -> tuple[list[Phantom], list[Phantom], list[Phantom]]:
    """(train, val, test); val phantoms come from the tail of the train seeds."""
    pool = generate_dataset(cfg.phantom, cfg.n_train + cfg.n_val, seed0=0)
    test = generate_dataset(cfg.test_phantom, cfg.n_test, seed0=TEST_SEED0)
    return pool[:cfg.n_train], pool[cfg.n_train:], test


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cache_dir() -> Path:
    return Path(os.environ.get("EXEMSEG_CACHE_DIR", Path(__file__).parents[2] / ".cache"))


def train_cached(cfg: ExperimentConfig, tag: str = "model",
                 force: bool = False) -> tuple[SliceSegmenter, Path]:
    """Train (or reload) the experiment's model; returns (model, checkpoint path)."""
    out = cache_dir()
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{tag}-{config_digest(cfg)}"
    ckpt = stem.with_suffix(".ckpt")
    if ckpt.exists() and not force:
        return SliceSegmenter.load(ckpt), ckpt
    train_ph, val_ph, _ = make_datasets(cfg)
    model = SliceSegmenter(cfg.train.model)
    rows = train(model, train_ph, cfg.train, val_phantoms=val_ph,
                 checkpoint_path=ckpt, log_path=stem.with_suffix(".csv"))
    if not rows or rows[-1].get("status") != "ok":
        raise RuntimeError(f"training did not finish cleanly: {rows[-1] if rows else 'no rows'}")
    return model, ckpt


# -- evaluation protocol -----------------------------------------------------------------


@dataclass
class ProtocolResult:
    lesion_budget: int
    click_budget: int
    use_semantic: bool
    scan_dscs: list[float]
    unprompted_f1s: list[float]          # phantoms with no unprompted lesions omitted
    distractor_fraction: float           # class-B share of all predicted foreground
    reports: list[EvalReport] = field(default_factory=list)

    @property
    def median_dsc(self) -> float:
        return float(np.median(self.scan_dscs))

    @property
    def median_unprompted_f1(self) -> float | None:
        return float(np.median(self.unprompted_f1s)) if self.unprompted_f1s else None

    def summary(self) -> dict:
        return {"lesion_budget": self.lesion_budget, "click_budget": self.click_budget,
                "use_semantic": self.use_semantic, "median_dsc": self.median_dsc,
                "median_unprompted_f1": self.median_unprompted_f1,
                "distractor_fraction": self.distractor_fraction,
                "scan_dscs": self.scan_dscs}


def evaluate_protocol(model: SliceSegmenter, phantoms: list[Phantom],
                      lesion_budget: int, click_budget: int,
                      use_semantic: bool = True, keep_reports: bool = False) -> ProtocolResult:
    eval_cfg = EvalConfig(max_lesions=lesion_budget, clicks_per_lesion=click_budget)
    dscs, f1s, reports = [], [], []
    pred_fg = 0
    distract_fg = 0
    for ph in phantoms:
        seg = SessionSegmenter(model, use_semantic=use_semantic)
        rep = run_lesionwise_eval(seg, ph.volume, ph.semantic_gt(), eval_cfg)
        dscs.append(rep.scan_dsc)
        if rep.unprompted_f1 is not None:
            f1s.append(rep.unprompted_f1)
        pred = rep.extras["pred_final"]
        pred_fg += int((pred > 0).sum())
        distract_fg += int(((pred > 0) & (ph.distractor_mask > 0)).sum())
        if keep_reports:
            reports.append(rep)
    frac = distract_fg / pred_fg if pred_fg else 0.0
    return ProtocolResult(lesion_budget=lesion_budget, click_budget=click_budget,
                          use_semantic=use_semantic, scan_dscs=dscs,
                          unprompted_f1s=f1s, distractor_fraction=frac,
                          reports=reports)


def budget_sweep(model: SliceSegmenter, phantoms: list[Phantom],
                 budgets: list[int], click_budget: int = 1,
                 use_semantic: bool = True) -> dict[int, ProtocolResult]:
    return {b: evaluate_protocol(model, phantoms, b, click_budget, use_semantic)
            for b in budgets}
