"""Command-line front end: phantom generation, training, evaluation, serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_phantom_gen(args) -> int:
    from exemseg.phantom import PhantomConfig, generate_dataset
    from exemseg.volume import save_volume

    cfg = PhantomConfig(lesion_count=(4, 6)) if args.test_config else PhantomConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ph in enumerate(generate_dataset(cfg, args.count, seed0=args.seed)):
        stem = out / f"phantom-{args.seed + i:04d}"
        save_volume(ph.volume, stem)
        np.savez_compressed(stem.with_suffix(".gt.npz"),
                            instance=ph.instance_gt, distractor=ph.distractor_mask,
                            centers=np.asarray(ph.lesion_centers))
        print(f"wrote {stem}.raw  ({ph.n_lesions} lesions)")
    return 0


def _cmd_train(args) -> int:
    from exemseg.experiments import default_experiment, train_cached

    cfg = default_experiment(shared_conditioning=args.variant == "shared",
                             seed=args.seed, epochs=args.epochs)
    model, ckpt = train_cached(cfg, tag=args.variant, force=args.force)
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    from exemseg.experiments import (default_experiment, evaluate_protocol,
                                     make_datasets)
    from exemseg.model import SliceSegmenter

    model = SliceSegmenter.load(args.checkpoint)
    _, _, test = make_datasets(default_experiment())
    res = evaluate_protocol(model, test[:args.n_test], lesion_budget=args.lesions,
                            click_budget=args.clicks,
                            use_semantic=not args.stage1_only)
    text = json.dumps(res.summary(), indent=1)
    print(text)
    if args.json:
        Path(args.json).write_text(text)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from exemseg.service import ServiceConfig, create_app

    base = ServiceConfig.from_env()
    cfg = ServiceConfig(model_path=args.model or base.model_path,
                        data_dir=args.data_dir or base.data_dir,
                        session_ttl_s=base.session_ttl_s,
                        max_sessions=base.max_sessions,
                        host=args.host or base.host,
                        port=args.port or base.port)
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="exemseg")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="write a synthetic phantom corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-config", action="store_true",
                   help="use the held-out corpus settings (more lesions)")
    g.set_defaults(fn=_cmd_phantom_gen)

    t = sub.add_parser("train", help="train a model variant (cached by config hash)")
    t.add_argument("--variant", choices=("dedicated", "shared"), default="dedicated")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="run the interactive evaluation protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--lesions", type=int, default=3)
    e.add_argument("--clicks", type=int, default=1)
    e.add_argument("--n-test", type=int, default=10)
    e.add_argument("--stage1-only", action="store_true")
    e.add_argument("--json", help="also write the summary to this path")
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("serve", help="start the HTTP session service")
    s.add_argument("--model", help="checkpoint for the default model")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--data-dir")
    s.set_defaults(fn=_cmd_serve)

    args = p.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
