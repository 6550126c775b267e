"""Command-line entry point: ``desnow <subcommand> ...``."""
import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from .config import coerce_fields, parse_kv, read_kv_file, to_kv
from .errors import ConfigurationError, InvalidInputError
from .laplace_vqvae import LaplaceVQVAE, VQVAEConfig, count_parameters
from .losses_metrics import LossWeights, MetricReport
from .mqformer import MQFormer, MQFormerConfig
from .snow_synth import DatasetManifest, SnowMaskSpec, make_dataset
from .training import (TrainConfig, desk_preset, evaluate, infer, load_model,
                       run_ablation, train_stage1, train_stage2)

log = logging.getLogger("desnow")


def _split_config(raw, model_cls):
    """Route flat keys to TrainConfig or the model config; unknown keys are an error."""
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    model_keys = {f.name for f in dataclasses.fields(model_cls)}
    unknown = set(raw) - train_keys - model_keys
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
    return ({k: v for k, v in raw.items() if k in train_keys},
            {k: v for k, v in raw.items() if k in model_keys})


def _gather(args):
    raw = read_kv_file(args.config) if args.config else {}
    for item in args.set or []:
        raw.update(parse_kv(item))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return raw


def _configs(args, stage, model_cls):
    train_raw, model_raw = _split_config(_gather(args), model_cls)
    if args.desk:
        vq, mq, s1, s2 = desk_preset()
        base_train = dataclasses.asdict(s1 if stage == 1 else s2)
        base_model = dataclasses.asdict(vq if model_cls is VQVAEConfig else mq)
    else:
        base_train = dataclasses.asdict(TrainConfig.for_stage(stage))
        base_model = dataclasses.asdict(model_cls())
    train_cfg = TrainConfig(**{**base_train, **coerce_fields(TrainConfig, train_raw)})
    model_cfg = model_cls(**{**base_model, **coerce_fields(model_cls, model_raw)})
    return train_cfg, model_cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    spec_raw = read_kv_file(args.config) if args.config else {}
    for item in args.set or []:
        spec_raw.update(parse_kv(item))
    spec = SnowMaskSpec(**coerce_fields(SnowMaskSpec, spec_raw))
    fractions = tuple(float(x) for x in args.split.split(","))
    seed = args.seed if args.seed is not None else spec.seed
    mans = make_dataset(args.out, spec, args.n, fractions, args.clean_dir, args.size, seed)
    for split, man in mans.items():
        print(f"{split}={len(man)}")


def cmd_train_vqvae(args):
    cfg, vq_cfg = _configs(args, 1, VQVAEConfig)
    ck = train_stage1(DatasetManifest.load(args.data), cfg, vq_cfg)
    out = _out(args)
    path = ck.save(out / "vqvae.pt")
    _write_summary(out / "vqvae_summary.txt", ck)
    print(f"checkpoint={path}")


def cmd_train(args):
    cfg, mq_cfg = _configs(args, 2, MQFormerConfig)
    ck = train_stage2(DatasetManifest.load(args.data), args.vqvae, cfg, mq_cfg)
    out = _out(args)
    path = ck.save(out / "mqformer.pt")
    _write_summary(out / "mqformer_summary.txt", ck)
    print(f"checkpoint={path}")


def _write_summary(path, ck):
    lines = [f"kind={ck.kind}", f"epoch={ck.epoch}", f"step={ck.step}",
             f"first_loss={ck.losses[0] if ck.losses else 'nan'}",
             f"final_loss={ck.losses[-1] if ck.losses else 'nan'}",
             f"param_hash={ck.param_hash()}"]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(args):
    model = load_model(args.vqvae, args.mqformer)
    report = evaluate(model, DatasetManifest.load(args.data), args.crop)
    out = _out(args)
    (out / "metrics.csv").write_text(MetricReport.CSV_HEADER + "\n" + report.metrics.to_csv_row() + "\n")
    (out / "per_image.csv").write_text(report.rows_csv())
    (out / "summary.txt").write_text(report.to_kv())
    sys.stdout.write(report.to_kv())


def cmd_infer(args):
    model = load_model(args.vqvae, args.mqformer)
    infer(model, args.input, args.output, args.mask_out)
    print(f"wrote {args.output}")


def cmd_ablate(args):
    cfg, mq_cfg = _configs(args, 2, MQFormerConfig)
    rows, csv_text = run_ablation(args.axis, DatasetManifest.load(args.data),
                                  DatasetManifest.load(args.eval_data), args.vqvae, cfg, mq_cfg)
    out = _out(args)
    (out / f"ablation_{args.axis}.csv").write_text(csv_text)
    sys.stdout.write(csv_text)


def cmd_params(args):
    print("# stage-1 training")
    print(to_kv(TrainConfig.for_stage(1)), end="")
    print("# stage-2 training")
    print(to_kv(TrainConfig.for_stage(2)), end="")
    print("# laplace vq-vae")
    print(to_kv(VQVAEConfig()), end="")
    print("# mqformer")
    print(to_kv(MQFormerConfig()), end="")
    print("# loss weights")
    print(to_kv(LossWeights()), end="")
    print("# snow synthesis")
    print(to_kv(SnowMaskSpec()), end="")
    a, b = count_parameters(LaplaceVQVAE()), count_parameters(MQFormer())
    print("# parameter counts (default configs)")
    print(f"params_vqvae={a}\nparams_mqformer={b}\nparams_total={a + b}")


def build_parser():
    p = argparse.ArgumentParser(prog="desnow", description="single-image snow removal toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic snow dataset"), "data")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--split", default="0.8,0.1,0.1")
    sp.add_argument("--clean-dir")
    sp.set_defaults(func=cmd_synth)

    for name, func in (("train-vqvae", cmd_train_vqvae), ("train", cmd_train)):
        sp = common(sub.add_parser(name, help=f"{'stage-1' if func is cmd_train_vqvae else 'stage-2'} training"))
        sp.add_argument("--data", required=True, help="training manifest (e.g. data/train.txt)")
        sp.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
        if func is cmd_train:
            sp.add_argument("--vqvae", required=True, help="stage-1 checkpoint")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("eval", help="evaluate checkpoints on a manifest"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--mqformer", required=True)
    sp.add_argument("--crop", type=int, default=256)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("infer", help="restore one image"))
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--mqformer", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--mask-out")
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("ablate", help="train and compare MQFormer variants"))
    sp.add_argument("--axis", choices=("modules", "queries"), required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--vqvae", required=True)
    sp.add_argument("--desk", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("params", help="print every default and the parameter budgets"))
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("LMQ_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        args.func(args)
    except (ConfigurationError, InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
