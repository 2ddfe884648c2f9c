"""Stage orchestration over one output workspace.

Every stage writes into its own subdirectory of --out together with a
meta.json carrying the config hash that produced it; loading an artifact
under a different hash is rejected. All stage outputs are deterministic
functions of (config, seed), so reruns are byte-identical.

Workspace layout:

    dataset/   manifest.json, tensors/, world.json        (synth)
    labels/    initial.ccdt, initial_calibrated.ccdt,
               bias.json, bias.csv                        (label-init)
    warmup/    head_weights.ccdt, head_biases.ccdt,
               trainlog.jsonl                             (warmup)
    update/    final.ccdt, local.ccdt, views.json,
               view_counts.csv                            (update-labels)
    train/     head_weights.ccdt, head_biases.ccdt,
               trainlog.jsonl                             (train)
    eval/      eval.json, per_class.csv                   (eval)
    report/    bias_report.json, bias_report.csv          (report)
    sweep/     run directories plus sweep.csv             (sweep)
"""

from __future__ import annotations

import copy
import csv
import io
import json
from pathlib import Path

import numpy as np

from .aggregate_fuse import aggregate_patches, fuse_labels
from .cam_views import FeatureMapTensor, ViewSet, propose_views
from .config import (
    PipelineConfig,
    config_hash,
    parse_config,
    resolve_path,
    substitute_command,
)
from .debias import BiasVector, calibrate, estimate_bias
from .errors import ArtifactMismatchError, ConfigError, DataError, ProviderError
from .eval_report import (
    EvalResult,
    bias_report,
    dump_json,
    eval_to_csv,
    evaluate,
    format_ap_table,
)
from .pseudo_label import PseudoLabelSet, initial_labels, softmax_probs
from .synth import generate_world
from .tensor_store import DatasetManifest, load_manifest, read_tensor, write_tensor
from .trainer import ClassifierHead, TrainingSet, forward, train
from .view_provider import (
    EmbeddingCache,
    SubprocessChannel,
    TcpChannel,
    check_handshake,
    request_embeddings,
)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(doc))


def _check_meta(stage_dir: Path, cfg_hash: str, stage: str) -> None:
    meta_path = stage_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"stage artifact missing: {meta_path} (run '{stage}' first)")
    meta = json.loads(meta_path.read_text())
    if meta.get("config_hash") != cfg_hash:
        raise ArtifactMismatchError(
            f"{stage_dir} was produced under config hash {meta.get('config_hash')},"
            f" current config hashes to {cfg_hash}"
        )


def _write_meta(stage_dir: Path, cfg: PipelineConfig, cfg_hash: str) -> None:
    _write_json(stage_dir / "meta.json", {"config_hash": cfg_hash, "seed": cfg.seed})


def _load_the_manifest(cfg: PipelineConfig, out: Path) -> DatasetManifest:
    return load_manifest(resolve_path(cfg.manifest, out))


def write_labels(stage_dir: Path, name: str, probs: np.ndarray, kind: str,
                 image_ids: list[str], class_names: list[str], cfg_hash: str) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(stage_dir / f"{name}.ccdt", np.asarray(probs, dtype=np.float32))
    _write_json(stage_dir / f"{name}.meta.json", {
        "kind": kind,
        "image_ids": image_ids,
        "class_names": class_names,
        "config_hash": cfg_hash,
    })


def read_labels(stage_dir: Path, name: str, cfg_hash: str) -> PseudoLabelSet:
    meta_path = stage_dir / f"{name}.meta.json"
    if not meta_path.exists():
        raise DataError(f"label artifact missing: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("config_hash") != cfg_hash:
        raise ArtifactMismatchError(
            f"{meta_path} carries config hash {meta.get('config_hash')}, expected {cfg_hash}"
        )
    probs = read_tensor(stage_dir / f"{name}.ccdt")
    kind = meta["kind"] if meta["kind"] in ("initial", "local", "final") else "final"
    return PseudoLabelSet(kind=kind, probs=probs, image_ids=list(meta["image_ids"]))


def read_label_array(stage_dir: Path, name: str, cfg_hash: str) -> tuple[np.ndarray, list[str]]:
    meta_path = stage_dir / f"{name}.meta.json"
    if not meta_path.exists():
        raise DataError(f"label artifact missing: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("config_hash") != cfg_hash:
        raise ArtifactMismatchError(
            f"{meta_path} carries config hash {meta.get('config_hash')}, expected {cfg_hash}"
        )
    return read_tensor(stage_dir / f"{name}.ccdt"), list(meta["image_ids"])


def save_head(stage_dir: Path, head: ClassifierHead, cfg: PipelineConfig, cfg_hash: str) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(stage_dir / "head_weights.ccdt", head.weights.astype(np.float32))
    write_tensor(stage_dir / "head_biases.ccdt", head.biases.astype(np.float32))
    _write_meta(stage_dir, cfg, cfg_hash)


def load_head(stage_dir: Path, cfg_hash: str, stage: str) -> ClassifierHead:
    _check_meta(stage_dir, cfg_hash, stage)
    return ClassifierHead(
        weights=read_tensor(stage_dir / "head_weights.ccdt"),
        biases=read_tensor(stage_dir / "head_biases.ccdt"),
    )


def load_pooled_features(manifest: DatasetManifest) -> tuple[list[str], np.ndarray,
                                                             np.ndarray | None,
                                                             np.ndarray | None]:
    """Globally-average-pooled features per image, plus pooled weak/strong
    views when the manifest provides them (all records or none)."""
    ids, base, weak, strong = [], [], [], []
    has_weak = [rec.weak_feature_path is not None for rec in manifest.image_records]
    has_strong = [rec.strong_feature_path is not None for rec in manifest.image_records]
    if any(has_weak) and not all(has_weak):
        raise DataError("weak_feature_path must be present on all records or none")
    if any(has_strong) and not all(has_strong):
        raise DataError("strong_feature_path must be present on all records or none")
    for rec in manifest.image_records:
        ids.append(rec.image_id)
        base.append(read_tensor(manifest.resolve(rec.feature_map_path)).mean(axis=(1, 2)))
        if rec.weak_feature_path:
            weak.append(read_tensor(manifest.resolve(rec.weak_feature_path)).mean(axis=(1, 2)))
        if rec.strong_feature_path:
            strong.append(read_tensor(manifest.resolve(rec.strong_feature_path)).mean(axis=(1, 2)))
    return (ids, np.stack(base).astype(np.float64),
            np.stack(weak).astype(np.float64) if weak else None,
            np.stack(strong).astype(np.float64) if strong else None)


def build_training_set(manifest: DatasetManifest, cfg: PipelineConfig) -> TrainingSet:
    ids, base, weak, strong = load_pooled_features(manifest)
    return TrainingSet.from_pooled(ids, base, cfg.train, weak=weak, strong=strong)


def open_provider_channel(cfg: PipelineConfig, out: Path):
    if cfg.provider.command is not None:
        return SubprocessChannel(substitute_command(cfg.provider.command, out), cwd=str(out))
    if cfg.provider.address is not None:
        return TcpChannel(cfg.provider.address)
    raise ProviderError("update-labels needs provider.command or provider.address in the config")


# --- stages -------------------------------------------------------------------

def run_synth(cfg: PipelineConfig, cfg_hash: str, out: Path):
    if cfg.synth is None:
        raise ConfigError("synth stage needs a 'synth' section in the config")
    dataset_dir = out / "dataset"
    world = generate_world(cfg.synth, dataset_dir)
    _write_meta(dataset_dir, cfg, cfg_hash)
    return world


def run_label_init(cfg: PipelineConfig, cfg_hash: str, out: Path) -> PseudoLabelSet:
    manifest = _load_the_manifest(cfg, out)
    texts = read_tensor(manifest.resolve(manifest.text_embedding_path))
    ids = [rec.image_id for rec in manifest.image_records]
    embs = np.stack([
        read_tensor(manifest.resolve(rec.global_embedding_path))
        for rec in manifest.image_records
    ])
    labels = initial_labels(embs, texts, cfg.tau, image_ids=ids)
    bias = estimate_bias(labels, cfg.debias)
    calibrated = calibrate(labels.probs, bias, cfg.debias)

    labels_dir = out / "labels"
    write_labels(labels_dir, "initial", labels.probs, "initial", ids,
                 manifest.class_names, cfg_hash)
    write_labels(labels_dir, "initial_calibrated", calibrated, "initial_calibrated",
                 ids, manifest.class_names, cfg_hash)
    report = bias.to_report(manifest.class_names)
    report["config_hash"] = cfg_hash
    _write_json(labels_dir / "bias.json", report)
    doc, csv_text = bias_report(labels, bias, manifest.class_names)
    (labels_dir / "bias.csv").write_text(csv_text)
    _write_meta(labels_dir, cfg, cfg_hash)
    return labels


def load_bias(out: Path, cfg_hash: str, class_names: list[str]) -> BiasVector:
    path = out / "labels" / "bias.json"
    if not path.exists():
        raise DataError(f"bias artifact missing: {path} (run label-init first)")
    doc = json.loads(path.read_text())
    if doc.get("config_hash") != cfg_hash:
        raise ArtifactMismatchError(
            f"{path} carries config hash {doc.get('config_hash')}, expected {cfg_hash}"
        )
    return BiasVector.from_report(doc, class_names)


def run_warmup(cfg: PipelineConfig, cfg_hash: str, out: Path) -> ClassifierHead:
    manifest = _load_the_manifest(cfg, out)
    labels = read_labels(out / "labels", "initial", cfg_hash)
    bias = load_bias(out, cfg_hash, manifest.class_names)
    dataset = build_training_set(manifest, cfg)
    head, log = train(dataset, labels, cfg.train, "warmup",
                      bias=bias, debias_cfg=cfg.debias)
    stage = out / "warmup"
    save_head(stage, head, cfg, cfg_hash)
    (stage / "trainlog.jsonl").write_text(log.to_jsonl())
    return head


def compute_patch_probs(embeddings: np.ndarray, texts: np.ndarray, tau: float,
                        bias: BiasVector, debias_cfg) -> np.ndarray:
    """Calibrated softmax rows for a batch of crop embeddings."""
    embs = np.asarray(embeddings, dtype=np.float64)
    txt = texts / np.linalg.norm(texts, axis=1, keepdims=True)
    emb_n = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    sims = emb_n @ txt.T
    probs = softmax_probs(sims, tau)
    return calibrate(probs, bias, debias_cfg)


def run_update_labels(cfg: PipelineConfig, cfg_hash: str, out: Path,
                      channel=None,
                      views_override: dict[str, ViewSet] | None = None) -> PseudoLabelSet:
    manifest = _load_the_manifest(cfg, out)
    texts = read_tensor(manifest.resolve(manifest.text_embedding_path)).astype(np.float64)
    bias = load_bias(out, cfg_hash, manifest.class_names)
    calibrated_init, ids = read_label_array(out / "labels", "initial_calibrated", cfg_hash)
    head = load_head(out / "warmup", cfg_hash, "warmup")

    view_sets: list[ViewSet] = []
    for rec in manifest.image_records:
        if views_override is not None:
            vs = views_override.get(rec.image_id, ViewSet(image_id=rec.image_id))
        else:
            fm = FeatureMapTensor(
                image_id=rec.image_id,
                values=read_tensor(manifest.resolve(rec.feature_map_path)),
                width_px=rec.width_px, height_px=rec.height_px,
            )
            probs = forward(head, fm.values.mean(axis=(1, 2)))
            vs = propose_views(fm, head.weights, probs, cfg.views, global_seed=cfg.seed)
        view_sets.append(vs)

    flat: list[tuple[str, object]] = [
        (vs.image_id, box) for vs in view_sets for box in vs.boxes
    ]

    own_channel = channel is None
    if own_channel:
        channel = open_provider_channel(cfg, out)
    try:
        check_handshake(channel.handshake(cfg.provider.timeout_s), manifest.embedding_dim)
        cache_path = (resolve_path(cfg.provider.cache, out)
                      if cfg.provider.cache else None)
        cache = EmbeddingCache(cache_path)
        embeddings = request_embeddings(
            flat, channel, cache, manifest.embedding_dim,
            resize_long=cfg.provider.resize_long,
            window=cfg.provider.window, timeout=cfg.provider.timeout_s,
        )
    finally:
        if own_channel:
            channel.close()

    patch_rows = (compute_patch_probs(embeddings, texts, cfg.tau, bias, cfg.debias)
                  if len(flat) else np.zeros((0, manifest.n_classes)))

    n_classes = manifest.n_classes
    final_rows, local_rows, counts = [], [], []
    offset = 0
    id_to_row = {iid: i for i, iid in enumerate(ids)}
    for vs in view_sets:
        rows = patch_rows[offset:offset + vs.n]
        offset += vs.n
        local = aggregate_patches(rows.reshape(vs.n, n_classes))
        init_row = calibrated_init[id_to_row[vs.image_id]]
        final_rows.append(fuse_labels(init_row, local, cfg.fuse_alpha))
        local_rows.append(np.zeros(n_classes) if local is None else local)
        counts.append(vs.n)

    stage = out / "update"
    image_ids = [vs.image_id for vs in view_sets]
    write_labels(stage, "final", np.stack(final_rows), "final", image_ids,
                 manifest.class_names, cfg_hash)
    write_labels(stage, "local", np.stack(local_rows), "local", image_ids,
                 manifest.class_names, cfg_hash)
    _write_json(stage / "views.json", {
        "config_hash": cfg_hash,
        "views": [vs.to_json() for vs in view_sets],
    })
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["image_id", "n_views"])
    for vs in view_sets:
        writer.writerow([vs.image_id, vs.n])
    (stage / "view_counts.csv").write_text(buf.getvalue())
    _write_meta(stage, cfg, cfg_hash)
    return PseudoLabelSet(kind="final", probs=np.stack(final_rows), image_ids=image_ids)


def run_train(cfg: PipelineConfig, cfg_hash: str, out: Path, full: bool = False,
              channel=None) -> ClassifierHead:
    if full:
        run_warmup(cfg, cfg_hash, out)
        run_update_labels(cfg, cfg_hash, out, channel=channel)
    manifest = _load_the_manifest(cfg, out)
    labels = read_labels(out / "update", "final", cfg_hash)
    warm = load_head(out / "warmup", cfg_hash, "warmup")
    dataset = build_training_set(manifest, cfg)
    head, log = train(dataset, labels, cfg.train, "main", head=warm)
    stage = out / "train"
    save_head(stage, head, cfg, cfg_hash)
    (stage / "trainlog.jsonl").write_text(log.to_jsonl())
    return head


def load_gt_matrix(manifest: DatasetManifest) -> np.ndarray:
    missing = [rec.image_id for rec in manifest.image_records if rec.gt_label_path is None]
    if missing:
        raise DataError(f"eval needs gt labels; missing for {missing[:3]}...")
    return np.stack([
        read_tensor(manifest.resolve(rec.gt_label_path))
        for rec in manifest.image_records
    ]).astype(np.int64)


def run_eval(cfg: PipelineConfig, cfg_hash: str, out: Path,
             head_stage: str = "train") -> EvalResult:
    manifest = _load_the_manifest(cfg, out)
    head = load_head(out / head_stage, cfg_hash, head_stage)
    ids, base, _, _ = load_pooled_features(manifest)
    scores = forward(head, base)
    gt = load_gt_matrix(manifest)
    result = evaluate(scores, gt)
    stage = out / "eval"
    stage.mkdir(parents=True, exist_ok=True)
    doc = result.to_json(manifest.class_names)
    doc["config_hash"] = cfg_hash
    _write_json(stage / "eval.json", doc)
    (stage / "per_class.csv").write_text(eval_to_csv(result, manifest.class_names))
    _write_meta(stage, cfg, cfg_hash)
    print(format_ap_table(result, manifest.class_names))
    return result


def run_report(cfg: PipelineConfig, cfg_hash: str, out: Path) -> dict:
    manifest = _load_the_manifest(cfg, out)
    labels = read_labels(out / "labels", "initial", cfg_hash)
    bias = load_bias(out, cfg_hash, manifest.class_names)
    doc, csv_text = bias_report(labels, bias, manifest.class_names)
    gt_counts = None
    if all(rec.gt_label_path is not None for rec in manifest.image_records):
        gt_counts = load_gt_matrix(manifest).sum(axis=0)
        for i, row in enumerate(doc["classes"]):
            row["gt_positive_count"] = int(gt_counts[i])
    doc["config_hash"] = cfg_hash
    stage = out / "report"
    _write_json(stage / "bias_report.json", doc)
    (stage / "bias_report.csv").write_text(csv_text)
    _write_meta(stage, cfg, cfg_hash)
    print(csv_text.strip())
    return doc


def _set_by_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"sweep parameter path {dotted!r} crosses a non-object")
    node[parts[-1]] = value


def run_sweep(cfg: PipelineConfig, cfg_hash: str, out: Path, config_doc: dict) -> list[dict]:
    if cfg.sweep is None:
        raise ConfigError("sweep stage needs a 'sweep' section in the config")
    parameter = cfg.sweep["parameter"]
    values = cfg.sweep["values"]

    if cfg.synth is not None:
        run_synth(cfg, cfg_hash, out)
    shared_manifest = str(resolve_path(cfg.manifest, out))

    rows: list[dict] = []
    for i, value in enumerate(values):
        sub_doc = copy.deepcopy(config_doc)
        sub_doc.pop("sweep", None)
        sub_doc.pop("synth", None)
        sub_doc["manifest"] = shared_manifest
        # the shared dataset lives under the parent out dir, so pin {out}
        # references in the provider command to it
        command = sub_doc.get("provider", {}).get("command")
        if command:
            sub_doc["provider"]["command"] = [
                arg.replace("{out}", str(out)) for arg in command
            ]
        _set_by_path(sub_doc, parameter, value)
        sub_cfg = parse_config(sub_doc)
        sub_hash = config_hash(sub_doc)
        sub_out = out / "sweep" / f"run_{i:02d}"
        sub_out.mkdir(parents=True, exist_ok=True)
        (sub_out / "config.json").write_text(dump_json(sub_doc))
        run_label_init(sub_cfg, sub_hash, sub_out)
        run_train(sub_cfg, sub_hash, sub_out, full=True)
        result = run_eval(sub_cfg, sub_hash, sub_out)
        rows.append({"parameter": parameter, "value": value, "map": result.mean})

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["parameter", "value", "map"])
    for row in rows:
        writer.writerow([row["parameter"], row["value"], row["map"]])
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "sweep.csv").write_text(buf.getvalue())
    _write_meta(sweep_dir, cfg, cfg_hash)
    return rows
