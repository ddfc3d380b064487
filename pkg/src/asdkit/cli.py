"""Command-line orchestration of the detection pipeline.

Stages: synth, pretrain, embed, cluster, finetune, score, eval, pipeline (all
of them in order). Every artifact is stamped with the config hash and seed;
`eval` refuses score files produced under a different config unless --force.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical failure.
The ASDKIT_OUTPUT environment variable overrides run.output_dir.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import backend as backend_mod
from . import corpus, finetune, metrics, pretrain, pseudolabel
from .config import (PipelineConfig, apply_overrides, parse_config, stamp_of)
from .encoder import (EncoderConfig, PatchTransformer, encoder_state, init_params,
                      load_checkpoint, load_encoder, save_checkpoint)
from .errors import ConfigError, CorpusError, MissingArtifactError, NumericalError, ParseError
from .frontend import FrontendParams, extract_features, patchify
from .csvio import parse_stamp, write_rows

TEACHER_CKPT = "pretrain_teacher.ckpt"
STUDENT_CKPT = "pretrain_student.ckpt"
PRETRAIN_LOSS_CSV = "pretrain_loss.csv"
PSEUDO_LABELS_CSV = "pseudo_labels.csv"
LOSS_CURVE_HEADER = ["step", "L_f", "L_u", "L_UFO"]
FINETUNE_CURVE_HEADER = ["step", "lr", "loss", "acc"]


def frontend_params(cfg: PipelineConfig) -> FrontendParams:
    f = cfg.frontend
    params = FrontendParams(sample_rate=f.sample_rate, clip_seconds=f.clip_seconds,
                            frame_length_ms=f.frame_length_ms, frame_shift_ms=f.frame_shift_ms,
                            n_mels=f.n_mels, patch_size=f.patch_size,
                            padded_frames=f.padded_frames)
    params.validate()
    return params


def encoder_config(cfg: PipelineConfig) -> EncoderConfig:
    fp = frontend_params(cfg)
    e = cfg.encoder
    config = EncoderConfig(depth=e.depth, dim=e.dim, heads=e.heads, mlp_ratio=e.mlp_ratio,
                           patch_dim=fp.patch_dim, n_patches=fp.n_patches)
    config.validate()
    return config


def output_dir(cfg: PipelineConfig) -> Path:
    out = os.environ.get("ASDKIT_OUTPUT") or cfg.run.output_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def dataset_roots(cfg: PipelineConfig) -> list[Path]:
    if cfg.data.roots:
        return [Path(r) for r in cfg.data.roots]
    synthetic = output_dir(cfg) / "corpus"
    if not synthetic.is_dir():
        raise MissingArtifactError(
            "no dataset roots configured and no synthetic corpus found; run `synth` first")
    return [synthetic]


def primary_manifest(cfg: PipelineConfig) -> corpus.DatasetManifest:
    return corpus.scan_dataset(dataset_roots(cfg)[0])


def synth_spec(cfg: PipelineConfig) -> corpus.SynthSpec:
    s = cfg.synth
    return corpus.SynthSpec(
        n_machines=s.n_machines, attrs_per_machine=s.attrs_per_machine,
        clips_per_attr_train=s.clips_per_attr_train, clips_per_attr_test=s.clips_per_attr_test,
        unattributed_machines=s.unattributed_machines, sample_rate=s.sample_rate,
        clip_seconds=s.clip_seconds, seed=cfg.run.seed, target_fraction=s.target_fraction)


def compute_embeddings(manifest: corpus.DatasetManifest, clips: Sequence[corpus.ClipMeta],
                       model: PatchTransformer, fparams: FrontendParams,
                       normalize: bool, batch_size: int = 32) -> dict[str, np.ndarray]:
    """Mean-pooled patch embeddings for the given clips."""
    model.eval()
    out: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for b0 in range(0, len(clips), batch_size):
            chunk = clips[b0:b0 + batch_size]
            grids = np.stack([
                patchify(extract_features(manifest.abspath(c), fparams, normalize), fparams)
                for c in chunk])
            z = model(torch.from_numpy(grids)).z
            pooled = z.mean(dim=1).numpy()
            for clip, vec in zip(chunk, pooled):
                out[clip.path] = vec.astype(np.float32)
    return out


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run `{hint}` first)")
    return path


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    root = out / "corpus"
    manifest = corpus.synth_corpus(synth_spec(cfg), root, out / "latent_attributes.csv")
    corpus.write_manifest_csv(manifest, out / "corpus_manifest.csv")
    print(f"synth: {len(manifest.clips)} clips for {len(manifest.machines)} machines -> {root}")


def cmd_pretrain(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifests = [corpus.scan_dataset(r) for r in dataset_roots(cfg)]
    fp = frontend_params(cfg)
    enc_cfg = encoder_config(cfg)
    p = cfg.pretrain
    config = pretrain.PretrainConfig(
        mask_ratio=p.mask_ratio, epochs=p.epochs, batch_size=p.batch_size, lr=p.lr,
        weight_decay=p.weight_decay, ema_start=p.ema_start, ema_end=p.ema_end,
        decoder_depth=p.decoder_depth, normalize_teacher_targets=p.normalize_teacher_targets)

    teacher, curve, state = pretrain.pretrain_run(
        manifests, fp, enc_cfg, config, cfg.run.seed,
        normalize_features=cfg.frontend.standardize)

    stamp = stamp_of(cfg)
    chash = parse_stamp(stamp)["config_hash"]
    save_checkpoint(out / TEACHER_CKPT, encoder_state(teacher), enc_cfg,
                    tag="teacher", config_hash=chash, seed=cfg.run.seed)
    student_params = encoder_state(state.student)
    student_params.update(encoder_state(state.decoder, prefix="decoder."))
    save_checkpoint(out / STUDENT_CKPT, student_params, enc_cfg,
                    tag="student", config_hash=chash, seed=cfg.run.seed)
    write_rows(out / PRETRAIN_LOSS_CSV, LOSS_CURVE_HEADER,
               [[s, repr(lf), repr(lu), repr(l)] for s, lf, lu, l in curve], stamp=stamp)
    print(f"pretrain: {len(curve)} steps, final loss {curve[-1][3]:.6f} -> {out / TEACHER_CKPT}")


def cmd_embed(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifest = primary_manifest(cfg)
    fp = frontend_params(cfg)
    enc_cfg = encoder_config(cfg)
    if args.random_init:
        model = init_params(enc_cfg, cfg.run.seed)
    else:
        ckpt_path = Path(args.checkpoint) if args.checkpoint else out / TEACHER_CKPT
        _require(ckpt_path, "encoder checkpoint", "pretrain")
        model, _ = load_encoder(ckpt_path)

    if args.split == "train":
        clips = manifest.train_clips()
    elif args.split == "test":
        clips = manifest.test_clips()
    else:
        clips = list(manifest.clips)
    embeddings = compute_embeddings(manifest, clips, model, fp, cfg.frontend.standardize)
    backend_mod.save_embeddings(out / args.output, embeddings, stamp=stamp_of(cfg))
    print(f"embed: {len(embeddings)} clips -> {out / args.output}.bin")


def cmd_cluster(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifest = primary_manifest(cfg)
    prefix = out / args.embeddings
    _require(prefix.with_suffix(".bin"), "embedding store", "embed")
    embeddings = backend_mod.load_embeddings(prefix)
    policy = pseudolabel.parse_policy(cfg.cluster.policy)
    labelings = pseudolabel.assign_pseudo_attributes(
        manifest, embeddings, policy,
        l2_normalize=cfg.cluster.l2_normalize, backend=cfg.cluster.backend)
    stamp = stamp_of(cfg)
    pseudolabel.write_pseudo_labels_csv(out / args.output, labelings, stamp=stamp)
    for machine, labeling in sorted(labelings.items()):
        if labeling.dendrogram is not None:
            pseudolabel.write_dendrogram_csv(out / f"dendrogram_{machine}.csv",
                                             labeling.dendrogram, stamp=stamp)
    ks = {m: l.k for m, l in sorted(labelings.items())}
    print(f"cluster: pseudo attributes {ks} -> {out / args.output}")


def cmd_finetune(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifest = primary_manifest(cfg)
    fp = frontend_params(cfg)
    enc_cfg = encoder_config(cfg)

    if args.from_scratch:
        encoder = init_params(enc_cfg, cfg.run.seed)
    else:
        init_path = Path(args.init_checkpoint) if args.init_checkpoint else out / TEACHER_CKPT
        _require(init_path, "encoder checkpoint", "pretrain")
        encoder, _ = load_encoder(init_path)

    if args.no_pseudo:
        label_space = finetune.build_label_space(manifest, no_pseudo=True)
    else:
        pseudo_path = Path(args.pseudo) if args.pseudo else out / PSEUDO_LABELS_CSV
        _require(pseudo_path, "pseudo labels", "cluster")
        labelings = pseudolabel.read_pseudo_labels_csv(pseudo_path)
        label_space = finetune.build_label_space(manifest, labelings)

    f = cfg.finetune
    config = finetune.FinetuneConfig(
        epochs=f.epochs, batch_size=f.batch_size, lr_peak=f.lr_peak,
        warmup_steps=f.warmup_steps, weight_decay=f.weight_decay, margin=f.margin,
        scale=f.scale, mixup=f.mixup, mixup_alpha=f.mixup_alpha,
        spec_augment=f.spec_augment, n_freq_masks=f.n_freq_masks,
        freq_mask_width=f.freq_mask_width, n_time_masks=f.n_time_masks,
        time_mask_width=f.time_mask_width, use_cls=f.use_cls)
    encoder, head, curve = finetune.finetune_run(
        manifest, label_space, encoder, fp, config, cfg.run.seed,
        normalize_features=cfg.frontend.standardize)

    stamp = stamp_of(cfg)
    params = encoder_state(encoder)
    params.update(finetune.head_state(head))
    save_checkpoint(out / f"{args.output}.ckpt", params, enc_cfg, tag="finetuned",
                    config_hash=parse_stamp(stamp)["config_hash"], seed=cfg.run.seed)
    write_rows(out / f"{args.output}_curve.csv", FINETUNE_CURVE_HEADER,
               [[s, repr(lr), repr(loss), repr(acc)] for s, lr, loss, acc in curve],
               stamp=stamp)
    print(f"finetune: {label_space.n_classes} classes, final acc {curve[-1][3]:.3f} "
          f"-> {out / (args.output + '.ckpt')}")


def cmd_score(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifest = primary_manifest(cfg)
    fp = frontend_params(cfg)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "finetuned.ckpt"
    _require(ckpt_path, "fine-tuned checkpoint", "finetune")
    model, _ = load_encoder(ckpt_path)

    train_embeddings = compute_embeddings(manifest, manifest.train_clips(), model, fp,
                                          cfg.frontend.standardize)
    test_embeddings = compute_embeddings(manifest, manifest.test_clips(), model, fp,
                                         cfg.frontend.standardize)
    bank = backend_mod.build_memory_bank(manifest, train_embeddings)
    scores = backend_mod.score_clips(manifest, test_embeddings, bank,
                                     k=cfg.backend.k, per_domain_min=cfg.backend.per_domain_min)
    stamp = stamp_of(cfg)
    backend_mod.write_scores_csv(out / args.output, scores, stamp=stamp)
    backend_mod.save_embeddings(out / args.embeddings_output, test_embeddings, stamp=stamp)
    print(f"score: {len(scores)} test clips -> {out / args.output}")


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    out = output_dir(cfg)
    manifest = primary_manifest(cfg)
    scores_path = Path(args.scores) if args.scores else out / "scores.csv"
    if not scores_path.exists():
        raise MissingArtifactError(f"missing scores: {scores_path} (run `score` first)")
    stamp, scores = backend_mod.read_scores_csv(scores_path)
    recorded = parse_stamp(stamp).get("config_hash")
    current = parse_stamp(stamp_of(cfg))["config_hash"]
    if recorded != current and not args.force:
        raise MissingArtifactError(
            f"score file {scores_path} was produced under config hash {recorded}, "
            f"current is {current}; rerun `score` or pass --force")

    results = metrics.evaluate_machines(manifest, scores, p=cfg.metrics.pauc_p)
    subsets: dict[str, Sequence[str]] = {"all": list(manifest.machines)}
    if manifest.unattributed_machines:
        subsets["noattr"] = list(manifest.unattributed_machines)
    if cfg.metrics.dev_machines:
        subsets["dev"] = list(cfg.metrics.dev_machines)
    if cfg.metrics.eval_machines:
        subsets["eval"] = list(cfg.metrics.eval_machines)
    report = metrics.build_report(results, subsets)
    metrics.write_report_csv(out / args.output, report, stamp=stamp_of(cfg))

    if args.projection:
        prefix = out / args.projection_embeddings
        _require(prefix.with_suffix(".bin"), "test embedding store", "score")
        embeddings = backend_mod.load_embeddings(prefix)
        paths = sorted(embeddings)
        coords = metrics.compute_projection(np.stack([embeddings[p] for p in paths]))
        by_path = {c.path: c for c in manifest.clips}
        labels = [f"{by_path[p].machine_type}/{by_path[p].condition}" if p in by_path else "?"
                  for p in paths]
        metrics.write_projection_csv(out / "projection.csv", paths, labels, coords,
                                     stamp=stamp_of(cfg))

    for subset in sorted(report.aggregates):
        print(f"eval[{subset}]: {report.aggregates[subset]:.2f}")
    print(f"eval: report -> {out / args.output}")


def cmd_pipeline(cfg: PipelineConfig, args: argparse.Namespace) -> None:
    if not cfg.data.roots:
        cmd_synth(cfg, args)
    cmd_pretrain(cfg, args)
    ns = argparse.Namespace(**vars(args))
    ns.checkpoint = None
    ns.random_init = False
    ns.split = "all"
    ns.output = "embeddings"
    cmd_embed(cfg, ns)
    if not args.no_pseudo:
        ns = argparse.Namespace(**vars(args))
        ns.embeddings = "embeddings"
        ns.output = PSEUDO_LABELS_CSV
        cmd_cluster(cfg, ns)
    ns = argparse.Namespace(**vars(args))
    ns.init_checkpoint = None
    ns.pseudo = None
    ns.output = "finetuned"
    cmd_finetune(cfg, ns)
    ns = argparse.Namespace(**vars(args))
    ns.checkpoint = None
    ns.output = "scores.csv"
    ns.embeddings_output = "test_embeddings"
    cmd_score(cfg, ns)
    ns = argparse.Namespace(**vars(args))
    ns.scores = None
    ns.output = "report.csv"
    ns.force = False
    ns.projection = args.projection
    ns.projection_embeddings = "test_embeddings"
    cmd_eval(cfg, ns)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asdkit",
                                     description="Anomalous sound detection pipeline")
    parser.add_argument("--config", type=str, default=None, help="config file path")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic corpus")
    sub.add_parser("pretrain", help="self-supervised pre-training on all dataset roots")

    p = sub.add_parser("embed", help="export pooled clip embeddings")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--random-init", action="store_true",
                   help="use an untrained encoder instead of a checkpoint")
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.add_argument("--output", default="embeddings", help="store prefix inside the output dir")

    p = sub.add_parser("cluster", help="assign pseudo attributes to unattributed machines")
    p.add_argument("--embeddings", default="embeddings")
    p.add_argument("--output", default=PSEUDO_LABELS_CSV)

    p = sub.add_parser("finetune", help="attribute-classification fine-tuning")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--from-scratch", action="store_true",
                   help="start from a randomly initialized encoder")
    p.add_argument("--no-pseudo", action="store_true",
                   help="group each unattributed machine into a single noAttr class")
    p.add_argument("--pseudo", default=None, help="pseudo label CSV path")
    p.add_argument("--output", default="finetuned")

    p = sub.add_parser("score", help="KNN anomaly scores for the test split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--output", default="scores.csv")
    p.add_argument("--embeddings-output", default="test_embeddings")

    p = sub.add_parser("eval", help="AUC/pAUC report from a score file")
    p.add_argument("--scores", default=None)
    p.add_argument("--output", default="report.csv")
    p.add_argument("--force", action="store_true", help="ignore config hash mismatches")
    p.add_argument("--projection", action="store_true", help="also export 2-D projection")
    p.add_argument("--projection-embeddings", default="test_embeddings")

    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--no-pseudo", action="store_true")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--projection", action="store_true")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "finetune": cmd_finetune,
    "score": cmd_score,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else PipelineConfig()
        cfg = apply_overrides(cfg, args.overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, CorpusError, ParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
