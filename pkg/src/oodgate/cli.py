"""Command-line pipeline driver.

Commands: synth, featurize, train, fit-boundaries, train-fusion, evaluate,
score, pipeline. Every command is deterministic given config + seed; file
writes go through a .partial rename so interrupted stages never leave a
complete-looking artifact.

Exit codes: 0 success, 1 internal failure, 2 user/input error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from oodgate import boundary as bd
from oodgate import dataset as ds
from oodgate import fusion as fu
from oodgate import metrics as mt
from oodgate import nncore as nn
from oodgate.config import RunConfig
from oodgate.errors import UserError
from oodgate.seeding import sub_seed

ARTIFACTS = {
    "manifest": "manifest.tsv",
    "features": "features.tsv",
    "proxy_families": "proxy_families.txt",
    "stage1": "stage1.ckpt",
    "boundaries": "boundaries.txt",
    "fusion": "fusion.ckpt",
    "report": "metrics_report.txt",
    "roc": "roc_points.tsv",
    "pr_id": "pr_points_id.tsv",
    "pr_ood": "pr_points_ood.tsv",
}


def artifact(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.get("work.dir"), ARTIFACTS[name])


def atomic_write(path: str, writer) -> None:
    """Run writer(partial_path), then rename into place."""
    partial = path + ".partial"
    writer(partial)
    os.replace(partial, path)


# ---------------------------------------------------------------------------
# Artifact loading

def load_dataset(cfg: RunConfig) -> tuple[ds.DatasetManifest, dict[str, np.ndarray], list[str]]:
    features, _ = ds.read_features(artifact(cfg, "features"))
    manifest = ds.read_manifest(artifact(cfg, "manifest"), features=features)
    proxy_path = artifact(cfg, "proxy_families")
    proxies: list[str] = []
    if os.path.exists(proxy_path):
        with open(proxy_path) as f:
            proxies = [line.strip() for line in f if line.strip()]
    return manifest, features, proxies


def split_matrix(manifest: ds.DatasetManifest, split: str,
                 id_only: bool = True) -> tuple[np.ndarray, np.ndarray, list[ds.SampleRecord]]:
    recs = [s for s in manifest.by_split(split)
            if not id_only or s.family in manifest.families]
    if not recs:
        raise UserError(f"no samples in split {split!r}")
    X = np.vstack([s.features for s in recs])
    y = np.array([manifest.families.index(s.family) if s.family in manifest.families
                  else -1 for s in recs])
    return X, y, recs


def load_stage1(cfg: RunConfig) -> nn.MlpModel:
    model = nn.load_checkpoint(artifact(cfg, "stage1"))
    if model.meta.get("kind") != "stage1":
        raise UserError(f"expected a stage1 checkpoint, found kind="
                        f"{model.meta.get('kind')!r}")
    return model


def load_fusion(cfg: RunConfig) -> nn.MlpModel:
    model = nn.load_checkpoint(artifact(cfg, "fusion"))
    if model.meta.get("kind") != "fusion":
        raise UserError(f"expected a fusion checkpoint, found kind="
                        f"{model.meta.get('kind')!r}")
    return model


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(cfg: RunConfig) -> None:
    n_id = cfg.get_int("synth.n_id_families")
    n_proxy = cfg.get_int("synth.n_proxy_families")
    n_ood = cfg.get_int("synth.n_ood_families")
    spec = ds.SynthSpec(
        n_families=n_id + n_proxy + n_ood,
        dim=cfg.get_int("synth.dim"),
        samples_per_family=cfg.get_int("synth.samples_per_family"),
        centroid_separation=cfg.get_float("synth.centroid_separation"),
        intra_family_sigma=cfg.get_float("synth.intra_family_sigma"),
        n_ood_families=n_proxy + n_ood)
    seed = cfg.get_int("seed")
    result = ds.generate_synthetic(spec, seed)
    manifest = ds.split_dataset(result.manifest, cfg.split_ratios(), seed)
    proxies = manifest.ood_families[:n_proxy]

    os.makedirs(cfg.get("work.dir"), exist_ok=True)
    ids = [s.id for s in manifest.samples]
    atomic_write(artifact(cfg, "features"),
                 lambda p: ds.write_features(p, ids, result.features, "synthetic"))
    atomic_write(artifact(cfg, "manifest"),
                 lambda p: ds.write_manifest(manifest, p))
    atomic_write(artifact(cfg, "proxy_families"),
                 lambda p: open(p, "w").write("".join(f"{x}\n" for x in proxies)))
    print(f"synth: {len(manifest.samples)} samples, {n_id} ID families, "
          f"{n_proxy} proxy OOD, {n_ood} test OOD, dim={spec.dim}, "
          f"separation={spec.centroid_separation}")


def cmd_featurize(cfg: RunConfig) -> None:
    data_dir = cfg.get("data.dir")
    if not data_dir:
        raise UserError("data.dir is required for featurize")
    scheme = cfg.get("data.scheme")
    manifest, errors = ds.ingest_directory(data_dir)
    for err in errors:
        print(f"featurize: skipped {err}", file=sys.stderr)
    ood_names = [x for x in cfg.get("data.ood_families").split(",") if x]
    proxy_names = [x for x in cfg.get("fusion.proxy_families").split(",") if x]
    held_out = ood_names + proxy_names
    for name in held_out:
        if name not in manifest.families:
            raise UserError(f"held-out family {name!r} not found in {data_dir}")
    id_families = [f for f in manifest.families if f not in held_out]
    manifest = ds.DatasetManifest(samples=manifest.samples, families=id_families,
                                  ood_families=proxy_names + ood_names,
                                  seed=cfg.get_int("seed"))
    manifest = ds.split_dataset(manifest, cfg.split_ratios(), cfg.get_int("seed"))

    ids = [s.id for s in manifest.samples]
    matrix = np.vstack([ds.featurize_bytes(s.payload, scheme) for s in manifest.samples])
    os.makedirs(cfg.get("work.dir"), exist_ok=True)
    atomic_write(artifact(cfg, "features"),
                 lambda p: ds.write_features(p, ids, matrix, scheme))
    atomic_write(artifact(cfg, "manifest"), lambda p: ds.write_manifest(manifest, p))
    atomic_write(artifact(cfg, "proxy_families"),
                 lambda p: open(p, "w").write("".join(f"{x}\n" for x in proxy_names)))
    print(f"featurize: {len(ids)} samples, {len(id_families)} ID families, "
          f"scheme={scheme}, dim={matrix.shape[1]}")


def stage1_train_config(cfg: RunConfig) -> nn.TrainConfig:
    return nn.TrainConfig(
        optimizer=cfg.get("stage1.optimizer"),
        base_lr=cfg.get_float("stage1.base_lr"),
        lr_schedule=cfg.get("stage1.lr_schedule"),
        lr_decay_factor=cfg.get_float("stage1.lr_decay_factor"),
        lr_decay_every=cfg.get_int("stage1.lr_decay_every"),
        epochs=cfg.get_int("stage1.epochs"),
        batch_size=cfg.get_int("stage1.batch_size"),
        seed=sub_seed(cfg.get_int("seed"), "stage1"))


def cmd_train(cfg: RunConfig) -> None:
    manifest, _, _ = load_dataset(cfg)
    X_train, y_train, _ = split_matrix(manifest, "train")
    X_val, y_val, _ = split_matrix(manifest, "val")
    K = len(manifest.families)
    mcfg = nn.MlpConfig(
        layer_dims=[X_train.shape[1]] + cfg.get_int_list("stage1.hidden") + [K],
        dropout_rate=cfg.get_float("stage1.dropout"),
        use_batchnorm=cfg.get_bool("stage1.batchnorm"))
    model = nn.init_model(mcfg, sub_seed(cfg.get_int("seed"), "init"))
    model.meta = {"kind": "stage1", "families": ",".join(manifest.families)}
    model, report = nn.train(model, X_train, y_train, X_val, y_val,
                             stage1_train_config(cfg))
    atomic_write(artifact(cfg, "stage1"), lambda p: nn.save_checkpoint(model, p))
    print(f"train: best epoch {report.best_epoch}, "
          f"val accuracy {report.val_accuracy[report.best_epoch]:.4f}")


def cmd_fit_boundaries(cfg: RunConfig) -> None:
    manifest, _, _ = load_dataset(cfg)
    stage1 = load_stage1(cfg)
    X_train, y_train, _ = split_matrix(manifest, "train")
    embeddings = nn.embed(stage1, X_train)
    bset = bd.fit_boundaries(embeddings, y_train,
                             sigma_mode=cfg.get("boundary.sigma_mode"))
    bset.band = cfg.get_float("boundary.band")
    atomic_write(artifact(cfg, "boundaries"), lambda p: bd.save_boundaries(bset, p))
    cvs = [bd.coefficient_of_variation(b.dist_mean, b.dist_std)
           for b in bset.boundaries]
    print(f"fit-boundaries: {bset.n_classes} families, dim={bset.embedding_dim}, "
          f"distance CV range [{min(cvs):.3f}, {max(cvs):.3f}]")


def _proxy_split(proxy_ids: list[str], seed: int) -> tuple[list[str], list[str]]:
    order = np.random.default_rng(sub_seed(seed, "proxy_split")).permutation(len(proxy_ids))
    n_val = max(1, len(proxy_ids) // 5)
    val = {proxy_ids[i] for i in order[:n_val]}
    return [x for x in proxy_ids if x not in val], sorted(val)


def cmd_train_fusion(cfg: RunConfig) -> None:
    manifest, features, proxies = load_dataset(cfg)
    stage1 = load_stage1(cfg)
    bset = bd.load_boundaries(artifact(cfg, "boundaries"))
    band = cfg.get_float("boundary.band")
    one_sided = cfg.get_bool("boundary.one_sided")
    K = len(manifest.families)

    X_train, y_train, _ = split_matrix(manifest, "train")
    X_val, y_val, _ = split_matrix(manifest, "val")
    proxy_ids = [s.id for s in manifest.samples if s.family in proxies]
    if proxy_ids:
        tr_ids, va_ids = _proxy_split(proxy_ids, cfg.get_int("seed"))
        X_train = np.vstack([X_train] + [features[i][None, :] for i in tr_ids])
        y_train = np.concatenate([y_train, np.full(len(tr_ids), K)])
        X_val = np.vstack([X_val] + [features[i][None, :] for i in va_ids])
        y_val = np.concatenate([y_val, np.full(len(va_ids), K)])

    F_train = fu.assemble_fusion_matrix(X_train, stage1, bset, band, one_sided)
    F_val = fu.assemble_fusion_matrix(X_val, stage1, bset, band, one_sided)
    model = fu.init_fusion_model(K, X_train.shape[1],
                                 sub_seed(cfg.get_int("seed"), "fusion_init"),
                                 hidden=cfg.get_int("fusion.hidden"))
    tcfg = nn.TrainConfig(
        optimizer=cfg.get("fusion.optimizer"),
        base_lr=cfg.get_float("fusion.base_lr"),
        lr_schedule=cfg.get("fusion.lr_schedule"),
        lr_decay_factor=cfg.get_float("fusion.lr_decay_factor"),
        lr_decay_every=cfg.get_int("fusion.lr_decay_every"),
        epochs=cfg.get_int("fusion.epochs"),
        batch_size=cfg.get_int("fusion.batch_size"),
        seed=sub_seed(cfg.get_int("seed"), "fusion"))
    model, report = fu.train_fusion(model, F_train, y_train, F_val, y_val, tcfg)
    atomic_write(artifact(cfg, "fusion"), lambda p: nn.save_checkpoint(model, p))
    print(f"train-fusion: best epoch {report.best_epoch}, "
          f"val accuracy {report.val_accuracy[report.best_epoch]:.4f}")


def apply_policy(policy: str, verdict: bd.OodVerdict,
                 final: fu.FinalPrediction, n_classes: int) -> int:
    """Resolve the final class index under the configured decision policy."""
    if policy == "fusion_priority":
        return final.predicted
    if verdict.decision == "out_of_distribution":
        return n_classes
    return int(final.class_probs[:n_classes].argmax())


def cmd_evaluate(cfg: RunConfig) -> None:
    manifest, _, proxies = load_dataset(cfg)
    stage1 = load_stage1(cfg)
    bset = bd.load_boundaries(artifact(cfg, "boundaries"))
    fusion_model = load_fusion(cfg)
    band = cfg.get_float("boundary.band")
    one_sided = cfg.get_bool("boundary.one_sided")
    policy = cfg.get("policy")
    scorer = cfg.get("metrics.scorer")
    K = len(manifest.families)

    test_recs = [s for s in manifest.by_split("test") if s.family not in proxies]
    if not test_recs:
        raise UserError("empty test split")
    samples, true_idx, prob_rows = [], [], []
    for rec in test_recs:
        fi, verdict = fu.assemble_fusion_input(rec.features, stage1, bset,
                                               band, one_sided)
        final = fu.predict_final(fi, fusion_model)
        predicted = apply_policy(policy, verdict, final, K)
        score = (-verdict.min_abs_z if scorer == "gate_z"
                 else 1.0 - final.ood_score)
        is_id = rec.family in manifest.families
        samples.append(mt.ScoredSample(id=rec.id, score=score, is_id=is_id,
                                       predicted=predicted, true_family=rec.family))
        true_idx.append(manifest.families.index(rec.family) if is_id else K)
        prob_rows.append(final.class_probs)
    report = mt.compute_report(samples, K, true_idx,
                               family_prob_matrix=np.vstack(prob_rows),
                               family_names=manifest.families)
    labels = manifest.families + ["OOD"]
    atomic_write(artifact(cfg, "report"),
                 lambda p: open(p, "w").write(mt.format_report(report, labels)))
    if cfg.get_bool("metrics.emit_curves"):
        for name, pts in (("roc", mt.roc_points(samples)),
                          ("pr_id", mt.pr_points(samples, "id")),
                          ("pr_ood", mt.pr_points(samples, "ood"))):
            atomic_write(artifact(cfg, name), lambda p, pts=pts: open(p, "w").write(
                "".join(f"{a!r}\t{b!r}\n" for a, b in pts)))
    print(f"evaluate: {len(samples)} test samples | auroc={report.auroc:.4f} "
          f"acc={report.acc:.4f} ar_ood={report.ar_ood:.4f} "
          f"fpr@tpr95={report.fpr_at_tpr95:.4f}")


def cmd_score(cfg: RunConfig, input_path: str | None, line: str | None) -> None:
    stage1 = load_stage1(cfg)
    bset = bd.load_boundaries(artifact(cfg, "boundaries"))
    fusion_model = load_fusion(cfg)
    band = cfg.get_float("boundary.band")
    one_sided = cfg.get_bool("boundary.one_sided")
    policy = cfg.get("policy")
    families = stage1.meta.get("families", "").split(",")

    entries: list[tuple[str, np.ndarray]] = []
    if line is not None:
        try:
            entries.append(("cmdline", np.array([float(v) for v in line.split(",")])))
        except ValueError:
            raise UserError(f"malformed feature line {line!r}") from None
    if input_path is not None:
        feats, _ = ds.read_features(input_path)
        entries.extend(feats.items())
    if not entries:
        raise UserError("score needs --input or --line")

    for sid, vec in entries:
        fi, verdict = fu.assemble_fusion_input(vec, stage1, bset, band, one_sided)
        final = fu.predict_final(fi, fusion_model)
        predicted = apply_policy(policy, verdict, final, bset.n_classes)
        top1 = int(fi.stage1_probs.argmax())
        name = families[predicted] if predicted < len(families) else "OOD"
        zs = ",".join(f"{z:.4f}" for z in verdict.z_scores)
        print(f"{sid}\tstage1={families[top1]}:{fi.stage1_probs[top1]:.4f}"
              f"\tz=[{zs}]\tgate={verdict.decision}\tsuspicion={verdict.suspicion}"
              f"\tfusion_ood={final.ood_score:.4f}\tfinal={name}")


PIPELINE_STAGES = [
    ("synth", cmd_synth),
    ("train", cmd_train),
    ("fit-boundaries", cmd_fit_boundaries),
    ("train-fusion", cmd_train_fusion),
    ("evaluate", cmd_evaluate),
]


def cmd_pipeline(cfg: RunConfig) -> None:
    for name, fn in PIPELINE_STAGES:
        if name == "synth" and cfg.get("data.source") == "dir":
            name, fn = "featurize", cmd_featurize
        try:
            fn(cfg)
        except UserError:
            raise
        except Exception as exc:
            raise RuntimeError(f"pipeline stage {name!r} failed: {exc}") from exc


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--work-dir", help="artifact directory override")
    common.add_argument("--policy", choices=["gate_priority", "fusion_priority"])
    common.add_argument("--band", type=float, help="z-score gate band override")
    common.add_argument("--one-sided", action="store_true",
                        help="gate on z <= band instead of |z| <= band")
    common.add_argument("--data-dir", help="raw specimen directory override")

    parser = argparse.ArgumentParser(
        prog="oodgate",
        description="Two-stage malware family classifier with a z-score OOD gate")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "featurize", "train", "fit-boundaries",
                 "train-fusion", "evaluate", "pipeline"):
        sub.add_parser(name, parents=[common])
    score = sub.add_parser("score", parents=[common])
    score.add_argument("--input", help="feature file to score")
    score.add_argument("--line", help="single comma-separated feature vector")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.work_dir is not None:
        overrides["work.dir"] = args.work_dir
    if args.policy is not None:
        overrides["policy"] = args.policy
    if args.band is not None:
        overrides["boundary.band"] = repr(args.band)
    if args.one_sided:
        overrides["boundary.one_sided"] = "1"
    if args.data_dir is not None:
        overrides["data.dir"] = args.data_dir
        overrides["data.source"] = "dir"
    return RunConfig.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "featurize":
            cmd_featurize(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "fit-boundaries":
            cmd_fit_boundaries(cfg)
        elif args.command == "train-fusion":
            cmd_train_fusion(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "score":
            cmd_score(cfg, args.input, args.line)
        elif args.command == "pipeline":
            cmd_pipeline(cfg)
        return 0
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
