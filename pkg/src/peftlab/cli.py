"""Command line harness.

Subcommands: generate-data, pretrain, train, evaluate, gradcheck,
param-audit, ablate, report.  Every command reads one JSON config
(--config, all fields optional) and accepts --key=value overrides using
dotted paths into the config, e.g. --adapter.r=4 --optimizer.epochs=2.
Outputs land under the config's out_dir, the PEFTLAB_OUT environment
variable, or ./runs, in that order of preference.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import ADAPTER_KINDS, FrozenLinear, make_adapter, param_count
from .checkpoint import load_checkpoint, restore_tensors, save_checkpoint
from .clips import build_tokenizer, corpus_digest, generate_corpus, load_corpus, save_corpus
from .config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    resolve_out_dir,
    save_config,
)
from .gradcheck import check_gradients
from .metrics import write_records_tsv, read_records_tsv, write_report_json, write_report_csv, aggregate
from .model import build_model, freeze_backbone, pretrain_backbone, wrap_model
from .operators import ConfigError
from .rng import SplitMix64, derive_seed
from .train import evaluate_model, run_training

GRADCHECK_TOL = 1e-4


def _load_cfg(args, extras) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = []
    for item in extras:
        if item.startswith("--") and "=" in item:
            overrides.append(item[2:])
        else:
            raise SystemExit(f"unrecognized argument {item!r}; overrides look like --adapter.r=4")
    return apply_overrides(cfg, overrides)


def _paths(cfg: ExperimentConfig):
    root = resolve_out_dir(cfg)
    return {"root": root, "corpus": root / "corpus", "backbone": root / "backbone.ckpt"}


def _run_dir(cfg, name=None) -> Path:
    return _paths(cfg)["root"] / "runs" / (name or cfg.adapter.kind)


def _corpus_seed(cfg) -> int:
    return derive_seed(cfg.seed, "corpus")


def _load_corpus_for(cfg, args):
    directory = Path(args.corpus) if getattr(args, "corpus", None) else _paths(cfg)["corpus"]
    if not (directory / "manifest.json").exists():
        raise SystemExit(f"no corpus at {directory}; run generate-data first")
    return load_corpus(directory)


def _fresh_model(cfg, corpus):
    return build_model(cfg.seed, vocab_size=len(build_tokenizer()),
                       n_answers=len(corpus.answers), width=cfg.model.width,
                       heads=cfg.model.heads, n_blocks=cfg.model.n_blocks,
                       patches=corpus.config["patches"], frames=corpus.config["frames"],
                       d_raw=corpus.config["d_raw"])


def _wrap_from_policy(model, cfg):
    pol = cfg.adapter
    return wrap_model(model, pol.kind, SplitMix64(derive_seed(cfg.seed, "wrap")),
                      r=pol.r, alpha=pol.alpha, operator=pol.operator, heads=pol.heads,
                      pos_embed=pol.pos_embed, t_max=pol.t_max, d_st=pol.d_st,
                      k_t=pol.k_t, epsilon=pol.epsilon, question_kind=pol.question_kind,
                      question_r=pol.question_r)


def _restore_backbone(model, cfg, args):
    path = Path(args.backbone) if getattr(args, "backbone", None) else _paths(cfg)["backbone"]
    if not path.exists():
        raise SystemExit(f"no backbone checkpoint at {path}; run pretrain first")
    stored, meta = load_checkpoint(path)
    restore_tensors(model.named_tensors(), stored)
    freeze_backbone(model)
    return meta


def _model_audit(model) -> dict:
    audit = param_count(model)
    audit["trainable_tensors"] = len(model.trainable_params())
    return audit


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    corpus = generate_corpus(_corpus_seed(cfg), sizes=cfg.corpus.sizes,
                             frames=cfg.corpus.frames, patches=cfg.corpus.patches,
                             d_raw=cfg.corpus.d_raw, noise_std=cfg.corpus.noise_std)
    directory = _paths(cfg)["corpus"]
    save_corpus(corpus, directory)
    save_config(cfg, directory / "config.json")
    digest = corpus_digest(directory)
    counts = {name: len(corpus.split(name)) for name in ("train", "val", "test")}
    print(f"corpus written to {directory}")
    print(f"counts {counts}")
    print(f"corpus digest {digest}")
    return 0


def cmd_pretrain(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    corpus = _load_corpus_for(cfg, args)
    model = _fresh_model(cfg, corpus)
    start = time.monotonic()
    report = pretrain_backbone(model, corpus.split("train"), epochs=cfg.pretrain.epochs,
                               lr=cfg.pretrain.lr, batch=cfg.pretrain.batch,
                               holdout_fraction=cfg.pretrain.holdout_fraction,
                               seed=cfg.seed, max_frames=cfg.pretrain.max_frames)
    report["wall_time_s"] = time.monotonic() - start
    path = _paths(cfg)["backbone"]
    save_checkpoint(path, model.named_tensors(), {
        "kind": "backbone", "config_hash": config_hash(cfg),
        "vocab_hash": corpus.config["vocab_hash"], "seed": cfg.seed,
        "holdout_accuracy": report["holdout_accuracy"],
    })
    print(f"backbone written to {path}")
    print(f"holdout accuracy {report['holdout_accuracy']:.4f} "
          f"({report['n_holdout_frames']} frames)")
    return 0


def cmd_train(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    corpus = _load_corpus_for(cfg, args)
    model = _fresh_model(cfg, corpus)
    _restore_backbone(model, cfg, args)
    _wrap_from_policy(model, cfg)
    run_dir = _run_dir(cfg, args.name)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    meta = {"kind": cfg.adapter.kind, "config": cfg.to_dict(),
            "config_hash": config_hash(cfg), "vocab_hash": corpus.config["vocab_hash"]}
    start = time.monotonic()
    report = run_training(model, corpus, seed=cfg.seed, epochs=cfg.optimizer.epochs,
                          lr=cfg.optimizer.lr, batch=cfg.optimizer.batch,
                          grad_accum=cfg.optimizer.grad_accum,
                          optimizer=cfg.optimizer.kind,
                          checkpoint_path=run_dir / "checkpoint.bin",
                          checkpoint_meta=meta,
                          log=lambda line: print(line, flush=True))
    report["wall_time_s"] = time.monotonic() - start
    report["seed"] = cfg.seed
    report["params"] = _model_audit(model)
    (run_dir / "train_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"best val loss {report['best_val_loss']:.4f} at epoch {report['best_epoch']}")
    print(f"checkpoint {run_dir / 'checkpoint.bin'}")
    return 0


def _evaluate_checkpoint(ckpt_path: Path, corpus, splits):
    stored, meta = load_checkpoint(ckpt_path)
    if meta.get("vocab_hash") != corpus.config["vocab_hash"]:
        raise ConfigError(
            f"checkpoint {ckpt_path} was trained against a different question vocabulary")
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = _fresh_model(cfg, corpus)
    freeze_backbone(model)
    _wrap_from_policy(model, cfg)
    restore_tensors(model.named_tensors(), stored)
    records, report = evaluate_model(model, corpus, splits=splits)
    return records, report, meta


def cmd_evaluate(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    corpus = _load_corpus_for(cfg, args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _run_dir(cfg, args.name) / "checkpoint.bin"
    if not ckpt.exists():
        raise SystemExit(f"no checkpoint at {ckpt}")
    splits = tuple(s.strip() for s in args.splits.split(",") if s.strip())
    records, report, _ = _evaluate_checkpoint(ckpt, corpus, splits)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    write_records_tsv(out / "predictions.tsv", records)
    write_report_json(out / "metrics.json", report)
    write_report_csv(out / "metrics.csv", report)
    for split, values in sorted(report.splits.items()):
        row = "  ".join(f"{k} {v:.4f}" for k, v in sorted(values.items()))
        print(f"{split:>16}  {row}  (n={report.counts[split]})")
    for key, value in sorted(report.gaps.items()):
        print(f"gap in-out  {key} {value:+.4f}")
    print(f"reports written to {out}")
    return 0


def _gradcheck_rows(seeds):
    rows = []
    for kind in ADAPTER_KINDS:
        if kind == "none":
            continue
        worst = 0.0
        for seed in range(seeds):
            rng = SplitMix64(derive_seed(seed, f"gradcheck.{kind}"))
            base = FrozenLinear(
                np.asarray(rng.split("w0").normals(12 * 12, std=0.5)).reshape(12, 12),
                np.asarray(rng.split("bias").normals(12, std=0.1)))
            adapter = make_adapter(kind, base, rng.split("adapter"), r=4, heads=2,
                                   t_max=4, d_st=6)
            params = adapter.named_params()
            kick = rng.split("kick")
            for name, p in params:
                p.data[...] = np.asarray(kick.split(name).normals(p.size, std=0.2)).reshape(p.shape)
            x_data = np.asarray(rng.split("x").normals(2 * 4 * 2 * 12)).reshape(2, 4, 2, 12)

            def loss_fn():
                return T.reduce_sum(T.tanh(adapter.forward(base, T.Tensor(x_data))))

            result = check_gradients(loss_fn, params)
            worst = max(worst, result.max_rel_err)
        rows.append({"kind": kind, "worst_rel_err": worst, "ok": worst < GRADCHECK_TOL})
    return rows


def cmd_gradcheck(args, extras) -> int:
    _load_cfg(args, extras)  # validates config/overrides even though dims are fixed
    rows = _gradcheck_rows(args.seeds)
    width = max(len(r["kind"]) for r in rows)
    failed = False
    for row in rows:
        status = "ok" if row["ok"] else "FAIL"
        print(f"{row['kind']:<{width}}  worst rel err {row['worst_rel_err']:.3e}  {status}")
        failed = failed or not row["ok"]
    print(f"tolerance {GRADCHECK_TOL:g}, seeds {args.seeds}, "
          f"dims C_in=C_out=12 r=4 T=4 P=2 H=2")
    return 1 if failed else 0


def cmd_param_audit(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    corpus_cfg = cfg.corpus
    tok_size = len(build_tokenizer())
    print("single square layer, C=32, r=8, no position table:")
    for kind in ADAPTER_KINDS:
        rng = SplitMix64(derive_seed(0, f"audit.{kind}"))
        base = FrozenLinear(np.zeros((32, 32)))
        if kind == "none":
            counts = {"trainable": 0}
        else:
            adapter = make_adapter(kind, base, rng, r=8, heads=4, pos_embed=False,
                                   t_max=corpus_cfg.frames)
            counts = {"trainable": sum(p.size for _, p in adapter.named_params())}
        print(f"  {kind:<14} {counts['trainable']:>6}")
    print("full model, default policy dims per method:")
    rows = []
    for kind in ADAPTER_KINDS:
        model = build_model(cfg.seed, vocab_size=tok_size, n_answers=16,
                            width=cfg.model.width, heads=cfg.model.heads,
                            n_blocks=cfg.model.n_blocks, patches=corpus_cfg.patches,
                            frames=corpus_cfg.frames, d_raw=corpus_cfg.d_raw)
        freeze_backbone(model)
        kind_cfg = apply_overrides(cfg, [f"adapter.kind={kind}"])
        if kind != "none":
            _wrap_from_policy(model, kind_cfg)
        audit = param_count(model)
        rows.append((kind, audit))
        print(f"  {kind:<14} trainable {audit['trainable']:>7}  frozen {audit['frozen']:>7}  "
              f"ratio {audit['ratio']:.5f}")
    fractions = dict((k, a["ratio"]) for k, a in rows)
    if fractions["temporal_dora"] < fractions["st_adapter"]:
        print("ordering: temporal_dora < st_adapter (trainable fraction)")
    else:
        print("ordering VIOLATED: temporal_dora >= st_adapter")
        return 1
    return 0


_ABLATE_METRICS = ("bleu4", "rouge_l", "meteor_lite", "keyword_acc")


def cmd_ablate(args, extras) -> int:
    cfg = _load_cfg(args, extras)
    if bool(args.methods) == bool(args.operators):
        raise SystemExit("pass exactly one of --methods or --operators")
    corpus = _load_corpus_for(cfg, args)
    if args.methods:
        variants = [(kind.strip(), [f"adapter.kind={kind.strip()}"])
                    for kind in args.methods.split(",") if kind.strip()]
    else:
        variants = [(f"temporal_dora:{op.strip()}",
                     ["adapter.kind=temporal_dora", f"adapter.operator={op.strip()}"])
                    for op in args.operators.split(",") if op.strip()]
    out_dir = _paths(cfg)["root"] / "ablate"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, overrides in variants:
        variant_cfg = apply_overrides(cfg, overrides)
        row = {"variant": label, "status": "ok", "best_val_loss": ""}
        for split in ("in_template", "out_of_template"):
            for metric in _ABLATE_METRICS:
                row[f"{split}.{metric}"] = ""
        try:
            model = _fresh_model(variant_cfg, corpus)
            _restore_backbone(model, variant_cfg, args)
            _wrap_from_policy(model, variant_cfg)
            run_dir = out_dir / label.replace(":", "_")
            meta = {"kind": variant_cfg.adapter.kind, "config": variant_cfg.to_dict(),
                    "config_hash": config_hash(variant_cfg),
                    "vocab_hash": corpus.config["vocab_hash"]}
            report = run_training(model, corpus, seed=variant_cfg.seed,
                                  epochs=variant_cfg.optimizer.epochs,
                                  lr=variant_cfg.optimizer.lr,
                                  batch=variant_cfg.optimizer.batch,
                                  grad_accum=variant_cfg.optimizer.grad_accum,
                                  optimizer=variant_cfg.optimizer.kind,
                                  checkpoint_path=run_dir / "checkpoint.bin",
                                  checkpoint_meta=meta)
            records, metric_report = evaluate_model(model, corpus)
            write_records_tsv(run_dir / "predictions.tsv", records)
            write_report_json(run_dir / "metrics.json", metric_report)
            row["best_val_loss"] = f"{report['best_val_loss']:.6f}"
            for split in ("in_template", "out_of_template"):
                for metric in _ABLATE_METRICS:
                    row[f"{split}.{metric}"] = f"{metric_report.splits[split][metric]:.4f}"
            print(f"{label}: best val {report['best_val_loss']:.4f}")
        except Exception as err:  # keep the sweep alive; flag the variant
            row["status"] = f"failed: {type(err).__name__}: {err}"
            print(f"{label}: FAILED {type(err).__name__}: {err}")
        rows.append(row)
    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"ablation table {table}")
    return 0


def cmd_report(args, extras) -> int:
    _load_cfg(args, extras)
    records = read_records_tsv(args.records)
    report = aggregate(records)
    out = Path(args.out) if args.out else Path(args.records).parent
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "metrics.json", report)
    write_report_csv(out / "metrics.csv", report)
    for split, values in sorted(report.splits.items()):
        row = "  ".join(f"{k} {v:.4f}" for k, v in sorted(values.items()))
        print(f"{split:>16}  {row}  (n={report.counts[split]})")
    print(f"reports written to {out}")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="peftlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_args):
        # abbreviation off, otherwise a --seed=N override would match --seeds
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", help="JSON config file")
        for flag, kwargs in extra_args.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("generate-data", cmd_generate_data)
    add("pretrain", cmd_pretrain, **{"--corpus": {"help": "corpus directory"}})
    add("train", cmd_train, **{"--corpus": {"help": "corpus directory"},
                               "--backbone": {"help": "backbone checkpoint"},
                               "--name": {"help": "run name (default: adapter kind)"}})
    add("evaluate", cmd_evaluate, **{"--corpus": {"help": "corpus directory"},
                                     "--checkpoint": {"help": "checkpoint file"},
                                     "--name": {"help": "run name to locate the checkpoint"},
                                     "--splits": {"default": "test"},
                                     "--out": {"help": "report directory"}})
    add("gradcheck", cmd_gradcheck, **{"--seeds": {"type": int, "default": 5}})
    add("param-audit", cmd_param_audit)
    add("ablate", cmd_ablate, **{"--corpus": {"help": "corpus directory"},
                                 "--backbone": {"help": "backbone checkpoint"},
                                 "--methods": {"help": "comma list of adapter kinds"},
                                 "--operators": {"help": "comma list of temporal operators"}})
    add("report", cmd_report, **{"--records": {"required": True, "help": "predictions TSV"},
                                 "--out": {"help": "report directory"}})

    args, extras = parser.parse_known_args(argv)
    return args.fn(args, extras)


if __name__ == "__main__":
    sys.exit(main())
