"""Command line front end: dataset generation, training, evaluation, export.

Commands: ``gen``, ``train``, ``eval``, ``score-export``. Every option can
also come from a plain-text config file of ``key = value`` lines; precedence
is CLI flag, then config file, then built-in default. ``EPICA_SEED`` in the
environment overrides the default seed but never an explicit flag.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

from . import data as D
from .evaluation import compute_scores, evaluate, scores_to_csv
from .graph import GraphError, NonFiniteError
from .model import ModelDims, ScoreVariant, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_inductive, train_transductive, write_metrics_csv

__all__ = ["main"]


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_indices(text):
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str = ""
    required: bool = False
    choices: tuple | None = None


_COMMON_SEED = Opt("seed", int, 0, "base seed for all randomness")

_GEN_OPTS = (
    Opt("out_dir", str, None, "directory for the generated dataset", required=True),
    Opt("n_attrs", int, 8, "number of attribute tokens"),
    Opt("n_objs", int, 8, "number of object tokens"),
    Opt("blocks", int, 16, "visual blocks per image"),
    Opt("feature_dim", int, 32, "raw feature width per block"),
    Opt("attr_blocks", _parse_indices, (), "blocks carrying the attribute signature"),
    Opt("obj_blocks", _parse_indices, (), "blocks carrying the object signature"),
    Opt("noise_sigma", float, 0.1, "feature noise sigma"),
    Opt("images_per_pair", int, 20, "images generated per pair"),
    Opt("seen_fraction", float, 0.75, "fraction of pairs marked seen"),
    _COMMON_SEED,
)

_SPLIT_OPTS = (
    Opt("setting", str, "conventional", "evaluation setting", choices=("conventional", "generalized")),
    Opt("seen_test_fraction", float, 0.2, "generalized: seen images sent to test"),
    Opt("seen_val_fraction", float, 0.2, "generalized: seen images sent to val"),
    Opt("unseen_val_fraction", float, 0.5, "generalized: unseen images sent to val"),
    Opt("split_seed", int, 0, "seed of the generalized image partition"),
)

_MODEL_OPTS = (
    Opt("dk", int, 300, "joint space width"),
    Opt("embed_dim", int, 300, "token embedding width"),
    Opt("hidden", int, 512, "relevance network hidden width"),
    Opt("inv_temperature", float, 9.0, "attention softmax sharpness"),
    Opt("cross_attention", _parse_bool, True, "disable for the unimodal ablation"),
    Opt("gated_pooling", _parse_bool, True, "disable to mean-pool elements"),
)

_TRAIN_OPTS = (
    Opt("features", str, None, "feature file", required=True),
    Opt("split", str, None, "pair split manifest", required=True),
    Opt("embeddings", str, "", "optional embedding text file"),
    Opt("checkpoint_out", str, None, "final checkpoint path", required=True),
    Opt("metrics_out", str, "", "metrics CSV path (default: beside checkpoint)"),
    Opt("init_checkpoint", str, "", "starting checkpoint (required for phase=transductive)"),
    Opt("phase", str, "both", "training phases to run", choices=("inductive", "transductive", "both")),
    Opt("train_embeddings", _parse_bool, False, "unfreeze the embedding table"),
    Opt("n_t", int, 50, "negative pairs per episode"),
    Opt("batch_size", int, 64, "episodes per optimizer step"),
    Opt("lr", float, 1e-3, "initial learning rate"),
    Opt("lr_decay", float, 0.5, "learning-rate multiplier"),
    Opt("lr_decay_every", int, 5, "epochs between decays"),
    Opt("epochs_inductive", int, 25, "inductive epochs"),
    Opt("epochs_transductive", int, 10, "transductive epochs"),
    Opt("sample_interval", int, 1, "epochs between confidence re-sampling"),
    Opt("gamma", float, 10.0, "confidence ratio threshold"),
    Opt("q", float, 0.5, "generalized cross-entropy exponent"),
    Opt("threads", int, 1, "worker cap; 1 is the bit-exact path"),
    _COMMON_SEED,
) + _MODEL_OPTS + _SPLIT_OPTS

_EVAL_OPTS = (
    Opt("features", str, None, "feature file", required=True),
    Opt("split", str, None, "pair split manifest", required=True),
    Opt("checkpoint", str, None, "checkpoint to evaluate", required=True),
    Opt("report_out", str, None, "evaluation report path", required=True),
    Opt("scores_out", str, "", "optional score matrix CSV export"),
    Opt("include_curves", _parse_bool, False, "embed curve points in the report"),
    Opt("cross_attention", _parse_bool, True, ""),
    Opt("gated_pooling", _parse_bool, True, ""),
    Opt("threads", int, 1, "worker cap; 1 is the bit-exact path"),
    _COMMON_SEED,
) + _SPLIT_OPTS

_EXPORT_OPTS = (
    Opt("features", str, None, "feature file", required=True),
    Opt("split", str, None, "pair split manifest", required=True),
    Opt("checkpoint", str, None, "checkpoint to score with", required=True),
    Opt("out", str, None, "score matrix CSV path", required=True),
    Opt("items", str, "test", "which image set to score", choices=("test", "val", "train")),
    Opt("cross_attention", _parse_bool, True, ""),
    Opt("gated_pooling", _parse_bool, True, ""),
    Opt("threads", int, 1, "worker cap; 1 is the bit-exact path"),
    _COMMON_SEED,
) + _SPLIT_OPTS

COMMAND_OPTS = {
    "gen": _GEN_OPTS,
    "train": _TRAIN_OPTS,
    "eval": _EVAL_OPTS,
    "score-export": _EXPORT_OPTS,
}


def read_config_file(path):
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise D.ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_options(opts, args, file_values):
    """Apply flag > config file > default, with the optional env seed override."""
    seen_keys = {o.name for o in opts}
    for key in file_values:
        if key not in seen_keys:
            raise D.ConfigError(f"unknown config key {key!r}")
    out = {}
    for opt in opts:
        flag = getattr(args, opt.name)
        if flag is not None:
            out[opt.name] = flag
            continue
        if opt.name in file_values:
            try:
                value = opt.type(file_values[opt.name])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise D.ConfigError(f"config key {opt.name!r}: {exc}") from None
            if opt.choices and value not in opt.choices:
                raise D.ConfigError(
                    f"config key {opt.name!r} must be one of {opt.choices}"
                )
            out[opt.name] = value
            continue
        default = opt.default
        if opt.name == "seed" and "EPICA_SEED" in os.environ:
            default = int(os.environ["EPICA_SEED"])
        if default is None and opt.required:
            raise D.ConfigError(f"missing required option --{opt.name.replace('_', '-')}")
        out[opt.name] = default
    return out


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="epica",
        description="episode-based cross-attention for compositional recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMAND_OPTS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value config file")
        for opt in opts:
            kwargs = {"default": None, "type": opt.type, "help": opt.help}
            if opt.choices:
                kwargs["choices"] = opt.choices
            p.add_argument(f"--{opt.name.replace('_', '-')}", dest=opt.name, **kwargs)
    return parser


# -- shared loading -------------------------------------------------------------


def _load_dataset(cfg):
    vocab, seen, unseen = D.read_split_manifest(cfg["split"])
    seen_keys = {p.key for p in seen}
    items = D.load_features(cfg["features"], vocab, seen_keys)
    if cfg["setting"] == "conventional":
        split = D.split_conventional(items, seen, unseen, vocab)
    else:
        split = D.split_generalized(
            items,
            seen,
            unseen,
            vocab,
            seen_test_fraction=cfg["seen_test_fraction"],
            seen_val_fraction=cfg["seen_val_fraction"],
            unseen_val_fraction=cfg["unseen_val_fraction"],
            seed=cfg["split_seed"],
        )
    return split


def _variant(cfg):
    return ScoreVariant(
        cross_attention=cfg["cross_attention"], gated_pooling=cfg["gated_pooling"]
    )


def _check_features_match(split, dims):
    item = split.items[0]
    b, dv = item.blocks.shape
    if dv != dims.visual_dim or b != dims.blocks:
        raise D.ConfigError(
            f"checkpoint expects blocks ({dims.blocks}, {dims.visual_dim}), "
            f"features are ({b}, {dv})"
        )


# -- commands --------------------------------------------------------------------


def cmd_gen(cfg):
    blocks = cfg["blocks"]
    attr_blocks = cfg["attr_blocks"] or tuple(range(0, max(1, blocks // 4)))
    obj_blocks = cfg["obj_blocks"] or tuple(
        range(max(1, blocks // 4), max(2, blocks // 2))
    )
    world = D.SyntheticWorldConfig(
        n_attrs=cfg["n_attrs"],
        n_objs=cfg["n_objs"],
        blocks=blocks,
        feature_dim=cfg["feature_dim"],
        attr_blocks=attr_blocks,
        obj_blocks=obj_blocks,
        noise_sigma=cfg["noise_sigma"],
        images_per_pair=cfg["images_per_pair"],
        seen_fraction=cfg["seen_fraction"],
        seed=cfg["seed"],
    )
    split = D.generate_synthetic(world)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    features = os.path.join(cfg["out_dir"], "features.epcf")
    manifest = os.path.join(cfg["out_dir"], "pairs.split")
    vocab_path = os.path.join(cfg["out_dir"], "vocab.txt")
    D.save_features(features, split.items, split.vocab)
    D.write_split_manifest(manifest, split.vocab, split.seen_pairs, split.unseen_pairs)
    # The recorded vocabulary uses manifest first-appearance order, the same
    # ordering every downstream command derives, so all artifacts agree.
    D.write_vocab(vocab_path, D.read_split_manifest(manifest)[0])
    print(f"wrote {features}")
    print(f"wrote {manifest}")
    print(f"wrote {vocab_path}")
    print(
        f"pairs: {len(split.seen_pairs)} seen / {len(split.unseen_pairs)} unseen; "
        f"images: {len(split.train)} seen-labeled / {len(split.test)} unseen-labeled"
    )
    return 0


def _phase_path(base, phase):
    root, ext = os.path.splitext(base)
    return f"{root}.{phase}{ext or '.epck'}"


def cmd_train(cfg):
    split = _load_dataset(cfg)
    if cfg["embeddings"]:
        table = D.load_embeddings(
            cfg["embeddings"], split.vocab, seed=cfg["seed"],
            frozen=not cfg["train_embeddings"],
        )
    else:
        table = D.build_embeddings(
            split.vocab, cfg["embed_dim"], seed=cfg["seed"],
            frozen=not cfg["train_embeddings"],
        )
    item = split.items[0]
    dims = ModelDims(
        dk=cfg["dk"],
        embed_dim=table.dim,
        visual_dim=item.blocks.shape[1],
        blocks=item.blocks.shape[0],
        hidden=cfg["hidden"],
        inv_temperature=cfg["inv_temperature"],
    )
    train_cfg = TrainConfig(
        n_t=cfg["n_t"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        lr_decay=cfg["lr_decay"],
        lr_decay_every=cfg["lr_decay_every"],
        epochs_inductive=cfg["epochs_inductive"],
        epochs_transductive=cfg["epochs_transductive"],
        sample_interval=cfg["sample_interval"],
        gamma=cfg["gamma"],
        q=cfg["q"],
        seed=cfg["seed"],
    )
    variant = _variant(cfg)
    history = []
    params = None
    if cfg["init_checkpoint"]:
        params, ck_dims = load_checkpoint(
            cfg["init_checkpoint"], embed_frozen=not cfg["train_embeddings"]
        )
        dims = ck_dims
        _check_features_match(split, dims)
    phase = cfg["phase"]
    if phase in ("inductive", "both"):
        params, hist = train_inductive(
            split, table, train_cfg, dims, variant=variant, params=params
        )
        history += hist
        save_checkpoint(_phase_path(cfg["checkpoint_out"], "inductive"), params, dims)
        print(f"inductive: {len(hist)} epochs, final loss {hist[-1].loss:.6f}")
    if phase in ("transductive", "both"):
        if params is None:
            raise D.ConfigError(
                "phase=transductive needs --init-checkpoint for the starting model"
            )
        params, hist = train_transductive(
            params, split, table, train_cfg, dims,
            setting=cfg["setting"], variant=variant,
        )
        history += hist
        save_checkpoint(
            _phase_path(cfg["checkpoint_out"], "transductive"), params, dims
        )
        print(
            f"transductive: {len(hist)} epochs, final loss {hist[-1].loss:.6f}, "
            f"selected {hist[-1].selected}"
        )
    save_checkpoint(cfg["checkpoint_out"], params, dims)
    metrics = cfg["metrics_out"] or (
        os.path.splitext(cfg["checkpoint_out"])[0] + ".metrics.csv"
    )
    write_metrics_csv(metrics, history)
    print(f"wrote {cfg['checkpoint_out']}")
    print(f"wrote {metrics}")
    return 0


def cmd_eval(cfg):
    split = _load_dataset(cfg)
    params, dims = load_checkpoint(cfg["checkpoint"])
    _check_features_match(split, dims)
    table = _table_from_params(split, params)
    variant = _variant(cfg)
    report = evaluate(
        params, dims, table, split, cfg["setting"],
        variant=variant, threads=cfg["threads"], include_curves=cfg["include_curves"],
    )
    with open(cfg["report_out"], "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(f"wrote {cfg['report_out']}")
    if report.top1 is not None:
        print(f"top-1 (unseen pairs): {report.top1:.4f}")
    for part, values in sorted(report.auc.items()):
        pretty = ", ".join(f"k={k}: {v:.4f}" for k, v in sorted(values.items()))
        print(f"AUC [{part}]: {pretty}")
    if cfg["scores_out"]:
        sm = compute_scores(
            params, dims, table, split.test,
            split.candidate_pairs(cfg["setting"]), split.vocab,
            variant=variant, threads=cfg["threads"],
        )
        scores_to_csv(sm, cfg["scores_out"])
        print(f"wrote {cfg['scores_out']}")
    return 0


def _table_from_params(split, params):
    """Rebuild the token-row lookup for a checkpointed embedding block.

    Token order is derived from the split manifest exactly as at training
    time, so row indices line up with the stored embedding tensor.
    """
    table = D.build_embeddings(split.vocab, params["embed"].shape[1])
    if table.rows.shape != params["embed"].shape:
        raise D.ConfigError(
            f"checkpoint embeddings {params['embed'].shape} do not match "
            f"the {table.rows.shape[0]} tokens of this split"
        )
    table.rows = params["embed"]
    return table


def cmd_score_export(cfg):
    split = _load_dataset(cfg)
    params, dims = load_checkpoint(cfg["checkpoint"])
    _check_features_match(split, dims)
    table = _table_from_params(split, params)
    items = {"test": split.test, "val": split.val or [], "train": split.train}[
        cfg["items"]
    ]
    if not items:
        raise D.ConfigError(f"no items in the {cfg['items']!r} set for this setting")
    sm = compute_scores(
        params, dims, table, items, split.candidate_pairs(cfg["setting"]),
        split.vocab, variant=_variant(cfg), threads=cfg["threads"],
    )
    scores_to_csv(sm, cfg["out"])
    print(f"wrote {cfg['out']} ({sm.n_items} items x {sm.n_candidates} candidates)")
    return 0


_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "score-export": cmd_score_export,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_options(COMMAND_OPTS[args.command], args, file_values)
        return _HANDLERS[args.command](cfg)
    except D.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (D.DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NonFiniteError, GraphError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
