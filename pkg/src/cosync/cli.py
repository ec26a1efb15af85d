"""Command line front end: gen-data, train, infer, eval, verify.

Exit codes are part of the contract:

    0  success
    1  verification failure
    2  configuration problem (bad file, unknown key, bad value)
    3  artifact problem (missing or corrupt records and checkpoints,
       model/record mismatch)
    4  runtime abort (non-finite loss or sampler state)

Config files are flat ``key=value`` lines; ``#`` starts a comment.  The
train config takes :class:`TrainConfig` keys, a ``preset`` name, and
``model.``-prefixed overrides of the preset's model settings.  Seeds
resolve as flag, then ``COSYNC_SEED``, then config file, then default.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import os
import sys

import numpy as np

from .conditioning import MaskSpec
from .data import (
    RecordError,
    SyntheticTaskSpec,
    generate_synthetic_corpus,
    load_corpus_dir,
    load_record,
    save_record,
)
from .flow import GuidanceSpec, euler_sample, infill_extract, splice_reference
from .model import PRESETS, ModelConfig
from .trainer import (
    EVAL_CSV_HEADER,
    LOSS_CSV_HEADER,
    PROBE_NFES,
    CheckpointError,
    TrainAbort,
    TrainConfig,
    Trainer,
    evaluate_corpus,
    load_model,
)
from . import verify as verify_mod

CHECKPOINT_NAME = "checkpoint.pt"
LOSS_CSV_NAME = "loss.csv"


class ConfigError(Exception):
    """A problem in flags, environment, or a config file."""


class ArtifactMismatch(Exception):
    """Inputs that exist but do not fit together."""


# -- config file plumbing --------------------------------------------------


def read_kv_file(path: str) -> dict:
    """Flat ``key=value`` lines to a dict of raw strings."""
    if not os.path.exists(path):
        raise ConfigError(f"no config file at {path}")
    entries: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def parse_value(text: str):
    """Typed literal: bool, int, float, or a comma tuple of those."""
    if "," in text:
        return tuple(parse_value(part.strip()) for part in text.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse value {text!r}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def echo_config(pairs) -> None:
    for key, value in pairs:
        print(f"{key}={format_value(value)}")


def resolve_seed(flag_seed, config_seed=None, default: int = 0) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("COSYNC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"COSYNC_SEED must be an integer, got {env!r}") from None
    return default if config_seed is None else config_seed


def build_train_setup(entries: dict) -> tuple:
    """(preset name, ModelConfig, TrainConfig) from raw config entries."""
    entries = dict(entries)
    preset = entries.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_overrides = {}
    train_values = {}
    for key, raw in entries.items():
        if key.startswith("model."):
            model_overrides[key[len("model.") :]] = parse_value(raw)
        else:
            train_values[key] = parse_value(raw)
    base = PRESETS[preset]().to_dict()
    unknown = set(model_overrides) - set(base)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    base.update(model_overrides)
    model_config = ModelConfig.from_dict(base)
    train_config = TrainConfig.from_dict(train_values)
    return preset, model_config, train_config


def build_task_spec(entries: dict) -> SyntheticTaskSpec:
    known = {f.name for f in dataclasses.fields(SyntheticTaskSpec)}
    unknown = set(entries) - known
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    return SyntheticTaskSpec(**{k: parse_value(v) for k, v in entries.items()})


# -- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    entries = read_kv_file(args.config) if args.config else {}
    spec = build_task_spec(entries)
    spec.seed = resolve_seed(args.seed, spec.seed)
    spec.validate()
    echo_config(dataclasses.asdict(spec).items())
    corpus = generate_synthetic_corpus(spec)
    for record in corpus.records:
        save_record(record, args.out)
    print(f"wrote {len(corpus.records)} records to {args.out}")
    return 0


def _load_corpus(directory: str) -> list:
    if not os.path.isdir(directory):
        raise ArtifactMismatch(f"no data directory at {directory}")
    return load_corpus_dir(directory)


def cmd_train(args) -> int:
    if args.resume and args.config:
        raise ConfigError("pass either --config (fresh run) or --resume, not both")
    if not args.resume and not args.config:
        raise ConfigError("train needs --config or --resume")
    if args.steps is not None and args.steps < 1:
        raise ConfigError("--steps must be positive")
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, LOSS_CSV_NAME)
    ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)

    if args.resume:
        corpus = _load_corpus(args.data)
        trainer = Trainer.load_checkpoint(args.resume, corpus)
        preset = "resumed"
        fresh_csv = not os.path.exists(csv_path)
    else:
        # Config problems should surface before corpus problems.
        preset, model_config, train_config = build_train_setup(read_kv_file(args.config))
        train_config.seed = resolve_seed(args.seed, train_config.seed)
        corpus = _load_corpus(args.data)
        trainer = Trainer(model_config, train_config, corpus)
        fresh_csv = True
    if args.steps is not None:
        trainer.config.steps = args.steps

    echo_config([("preset", preset)])
    echo_config((f"model.{k}", v) for k, v in trainer.model.config.to_dict().items())
    echo_config(trainer.config.to_dict().items())

    if trainer.step >= trainer.config.steps:
        raise ConfigError(
            f"checkpoint is already at step {trainer.step} of {trainer.config.steps}"
        )
    mode = "w" if fresh_csv else "a"
    with open(csv_path, mode, encoding="utf-8") as csv:
        if fresh_csv:
            csv.write(LOSS_CSV_HEADER + "\n")

        def on_step(report):
            csv.write(report.csv_row() + "\n")
            csv.flush()
            if report.step % trainer.config.checkpoint_every == 0:
                trainer.save_checkpoint(ckpt_path)

        trainer.run(on_step=on_step)
    trainer.save_checkpoint(ckpt_path)
    final = trainer.history[-1]
    print(f"finished at step {final.step}, l_fm={final.l_fm!r}, total={final.total!r}")
    print(f"checkpoint: {ckpt_path}")
    print(f"loss log: {csv_path}")
    return 0


class _CountingModel:
    """Forwarding wrapper that counts field evaluations."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x, bundle, t):
        self.calls += 1
        return self.model(x, bundle, t)


def _check_record_fits(model, record) -> None:
    cfg = model.config
    if record.mel.shape[0] != cfg.num_mel_bins:
        raise ArtifactMismatch(
            f"record has {record.mel.shape[0]} mel bins, model expects {cfg.num_mel_bins}"
        )
    if record.lip_raw.shape[0] != cfg.lip_dim:
        raise ArtifactMismatch(
            f"record lip width {record.lip_raw.shape[0]}, model expects {cfg.lip_dim}"
        )
    if int(record.text_ids.max()) >= cfg.text_vocab_size:
        raise ArtifactMismatch(
            f"record token id {int(record.text_ids.max())} outside the model's "
            f"{cfg.text_vocab_size}-way text vocabulary"
        )


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    record = load_record(args.record)
    _check_record_fits(model, record)
    seed = resolve_seed(args.seed)
    guidance = GuidanceSpec(lambda_a=args.lambda_a, lambda_s=args.lambda_s)
    guidance.validate()
    if args.nfe < 1:
        raise ConfigError("--nfe must be positive")
    echo_config(
        [
            ("checkpoint", args.checkpoint),
            ("record", args.record),
            ("nfe", args.nfe),
            ("lambda_a", guidance.lambda_a),
            ("lambda_s", guidance.lambda_s),
            ("seed", seed),
            ("out", args.out),
        ]
    )

    mask = MaskSpec(record.ref_len, record.num_frames)
    bundle = model.build_bundle(record.mel, record.text_ids, record.lip_raw, mask)
    counter = _CountingModel(model)
    rng = np.random.default_rng(seed)
    x = euler_sample(counter, bundle, guidance, args.nfe, rng)
    full = splice_reference(x, record.mel, mask)
    region = infill_extract(x, mask)

    buffer = io.BytesIO()
    np.savez(buffer, full=full.numpy().astype("<f8"), region=region.numpy().astype("<f8"))
    tmp = args.out + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buffer.getvalue())
    os.replace(tmp, args.out)
    meta = (
        f"utt_id={record.utt_id}\nnfe={args.nfe}\n"
        f"lambda_a={guidance.lambda_a!r}\nlambda_s={guidance.lambda_s!r}\n"
        f"seed={seed}\nevaluations={counter.calls}\n"
    )
    with open(args.out + ".meta", "w", encoding="utf-8") as fh:
        fh.write(meta)
    print(f"model evaluations: {counter.calls}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    corpus = _load_corpus(args.data)
    for record in corpus:
        _check_record_fits(model, record)
    seed = resolve_seed(args.seed)
    nfes = args.nfe if args.nfe else list(PROBE_NFES)
    if any(n < 1 for n in nfes):
        raise ConfigError("--nfe entries must be positive")
    echo_config(
        [
            ("checkpoint", args.checkpoint),
            ("data", args.data),
            ("nfe", tuple(nfes)),
            ("seed", seed),
            ("out", args.out),
        ]
    )
    rows, pooled = evaluate_corpus(model, corpus, seed, tuple(nfes))
    lines = [EVAL_CSV_HEADER]
    lines += [f"{utt},{nfe},{mse!r},{kl!r}" for utt, nfe, mse, kl in rows]
    tmp = args.out + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, args.out)
    for nfe in nfes:
        print(f"pooled_sync_kl@{nfe}={pooled[nfe]!r}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name.ljust(width)}  {r.detail}")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


# -- wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosync",
        description="Mask-infill speech generator: synthetic data, training, "
        "sampling, evaluation, and self-checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--config", help="key=value file of task spec settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides COSYNC_SEED and the config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="optimize a model on a record directory")
    p.add_argument("--config", help="key=value file; train keys, preset, model.*")
    p.add_argument("--data", required=True, help="record directory")
    p.add_argument("--out", required=True, help="run directory for csv and checkpoints")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--steps", type=int, help="override the configured step target")
    p.add_argument("--seed", type=int, help="overrides COSYNC_SEED and the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sample the masked span of one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="record .npz path")
    p.add_argument("--nfe", type=int, default=32, help="Euler steps")
    p.add_argument("--lambda-a", type=float, default=0.0, dest="lambda_a")
    p.add_argument("--lambda-s", type=float, default=0.0, dest="lambda_s")
    p.add_argument("--seed", type=int, help="overrides COSYNC_SEED")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score generated spans over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="record directory")
    p.add_argument(
        "--nfe", type=lambda s: [int(x) for x in s.split(",")],
        help="comma-separated Euler step counts (default 8,16,32)",
    )
    p.add_argument("--seed", type=int, help="overrides COSYNC_SEED")
    p.add_argument("--out", required=True, help="output csv path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, RecordError, ArtifactMismatch) as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return 3
    except TrainAbort as err:
        print(f"run aborted: {err}", file=sys.stderr)
        return 4
    except RuntimeError as err:
        print(f"run aborted: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
