"""Command implementations: training, inference, evaluation, ablation.

Every run writes into a fresh output directory: the fully resolved
config, a CSV training log, checkpoints (float64 bundles so resume is
bit-exact), reports, and sweep curves. Nothing here reads wall-clock
time or other ambient state, so identical configs produce byte-identical
artifacts.
"""

import csv
import os

import numpy as np

from . import config as C
from . import tensorfile
from .affine import AffineTransform, TransformConfig, resize_bilinear, hflip_array
from .cam import CamStack, InferenceConfig, RAW_FOREGROUND, export_cam, fuse_multiscale, pseudo_label, rectify_and_scale
from .errors import ConfigError, DataError
from .evaluate import EvalReport, activation_metrics, confusion_counts, equivariance_error, miou, threshold_sweep
from .data import load_dataset
from .network import (MODE_WEIGHTS, ModelDims, ToyBackbone, TrainConfig,
                      batch_indices, forward_branch, poly_lr, siamese_step,
                      snap_transform_for_images, transform_for_step)
from . import tensor as T

DEFAULT_ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def model_dims_from_config(cfg):
    return ModelDims(
        stages=C.parse_ints(cfg["model.stages"]),
        reducers=C.parse_ints(cfg["model.reducers"]),
        embed=int(cfg["model.embed"]),
    )


def loss_weights_from_config(cfg):
    mode = cfg["train.mode"]
    if mode not in MODE_WEIGHTS:
        raise ConfigError(f"train.mode must be one of {sorted(MODE_WEIGHTS)}, got {mode!r}")
    preset = MODE_WEIGHTS[mode]
    keys = ("weights.cls", "weights.er", "weights.ecr")
    return tuple(float(cfg[k]) if cfg[k] is not None else preset[i]
                 for i, k in enumerate(keys))


def train_config_from_config(cfg):
    return TrainConfig(
        steps=int(cfg["train.steps"]),
        batch_size=int(cfg["train.batch_size"]),
        lr_init=float(cfg["train.lr_init"]),
        poly_gamma=float(cfg["train.poly_gamma"]),
        momentum=float(cfg["train.momentum"]),
        weight_decay=float(cfg["train.weight_decay"]),
        keep_fraction=float(cfg["train.keep_fraction"]),
        loss_weights=loss_weights_from_config(cfg),
        seed=int(cfg["train.seed"]),
        transform=TransformConfig(
            rescale_rate=_maybe_float(cfg["transform.rescale_rate"]),
            rotation_deg=_maybe_float(cfg["transform.rotation_deg"]),
            translation_px=_maybe_int(cfg["transform.translation_px"]),
            hflip=bool(cfg["transform.hflip"]),
            identity=bool(cfg["transform.identity"]),
        ),
        checkpoint_interval=int(cfg["train.checkpoint_interval"]),
    )


def _maybe_float(v):
    return None if v in (None, "") else float(v)


def _maybe_int(v):
    return None if v in (None, "") else int(v)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(out_dir, tag, model, velocities, step, mode):
    tensors = {}
    for name in sorted(model.params):
        tensors[f"param/{name}"] = model.params[name].data
    for name in sorted(velocities):
        tensors[f"velocity/{name}"] = velocities[name]
    meta = {
        "format": "seamcam-checkpoint-v1",
        "step": step,
        "mode": mode,
        "dims": model.dims.describe(),
    }
    tensorfile.save_bundle(os.path.join(out_dir, f"{tag}.bin"),
                           os.path.join(out_dir, f"{tag}.idx"),
                           tensors, meta=meta, version=2)


def _dims_from_description(text):
    fields = dict(part.split("=", 1) for part in text.split(";"))
    return ModelDims(stages=C.parse_ints(fields["stages"]),
                     reducers=C.parse_ints(fields["reducers"]),
                     embed=int(fields["embed"]),
                     num_foreground=int(fields["fg"]))


def load_checkpoint(path_prefix, dims=None):
    """Rebuild a model (+velocities, step, mode) from ``<prefix>.bin/.idx``.

    With ``dims=None`` the model dimensions are taken from the checkpoint;
    otherwise they must match, or the config is rejected.
    """
    bin_path, idx_path = f"{path_prefix}.bin", f"{path_prefix}.idx"
    if not os.path.exists(bin_path) or not os.path.exists(idx_path):
        raise DataError(f"checkpoint {path_prefix} not found")
    tensors, meta = tensorfile.load_bundle(bin_path, idx_path)
    if meta.get("format") != "seamcam-checkpoint-v1":
        raise ConfigError(f"{idx_path}: unrecognized checkpoint format {meta.get('format')!r}")
    if dims is None:
        dims = _dims_from_description(meta["dims"])
    elif meta.get("dims") != dims.describe():
        raise ConfigError(
            f"checkpoint dims {meta.get('dims')!r} do not match configured "
            f"model dims {dims.describe()!r}")
    model = ToyBackbone(dims=dims, seed=0)
    model.load_state({k.split("/", 1)[1]: v for k, v in tensors.items()
                      if k.startswith("param/")})
    velocities = {k.split("/", 1)[1]: v for k, v in tensors.items()
                  if k.startswith("velocity/")}
    return model, velocities, int(meta["step"]), meta.get("mode", "seam")


# ---------------------------------------------------------------------------
# training

def run_training(cfg, stop_after=None):
    """Train per config; returns (model, final step). Resumable and exact.

    ``stop_after`` caps the number of steps executed in this session
    (used to emulate interruption); the config's step count still defines
    the learning-rate schedule.
    """
    data_dir = C.require(cfg, "train.data")
    out_dir = C.require(cfg, "train.out")
    os.makedirs(out_dir, exist_ok=True)
    C.dump(cfg, os.path.join(out_dir, "config.json"))
    tc = train_config_from_config(cfg)
    dims = model_dims_from_config(cfg)
    mode = cfg["train.mode"]

    manifest, samples = load_dataset(data_dir)
    if dims.num_foreground != len(manifest.class_names):
        dims = ModelDims(stages=dims.stages, reducers=dims.reducers,
                         embed=dims.embed, num_foreground=len(manifest.class_names))
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])

    log_path = os.path.join(out_dir, "train_log.csv")
    start_step = 0
    if cfg["train.resume"] and os.path.exists(os.path.join(out_dir, "checkpoint.bin")):
        model, velocities, start_step, _ = load_checkpoint(
            os.path.join(out_dir, "checkpoint"), dims)
        log_mode = "a"
    else:
        model = ToyBackbone(dims=dims, seed=tc.seed)
        velocities = {}
        log_mode = "w"

    end_step = tc.steps if stop_after is None else min(tc.steps, start_step + stop_after)
    with open(log_path, log_mode, newline="") as log_fp:
        writer = csv.writer(log_fp)
        if log_mode == "w":
            writer.writerow(["step", "lr", "l_cls", "l_er", "l_ecr", "total"])
        for step in range(start_step, end_step):
            lr = poly_lr(step, tc.steps, tc.lr_init, tc.poly_gamma)
            idx = batch_indices(step, len(samples), tc.batch_size, tc.seed)
            transform = transform_for_step(tc, step)
            bundle = siamese_step(model, images[idx], labels[idx], transform,
                                  tc, velocities, lr)
            vals = bundle.values()
            writer.writerow([step, repr(lr), repr(vals["l_cls"]), repr(vals["l_er"]),
                             repr(vals["l_ecr"]), repr(vals["total"])])
            done = step + 1
            if done % tc.checkpoint_interval == 0 or done == end_step:
                log_fp.flush()
                save_checkpoint(out_dir, "checkpoint", model, velocities, done, mode)
                if done % tc.checkpoint_interval == 0 and done != tc.steps:
                    save_checkpoint(out_dir, f"checkpoint_{done:06d}", model,
                                    velocities, done, mode)
    return model, end_step


# ---------------------------------------------------------------------------
# inference

def infer_stack(model, image, infer_cfg, use_pcm):
    """Fused raw-foreground stack for one [3,H,W] image at its resolution."""
    h, w = image.shape[1], image.shape[2]
    stride = model.dims.stride
    per_scale, per_scale_flipped = [], []
    for s in infer_cfg.scales:
        t = snap_transform_for_images(AffineTransform(scale=float(s)), h, w, stride)
        oh, ow = t.output_hw(h, w)
        scaled = resize_bilinear(image[None], (oh, ow))
        per_scale.append(_forward_foreground(model, scaled, use_pcm))
        if infer_cfg.use_flip:
            per_scale_flipped.append(
                _forward_foreground(model, hflip_array(scaled), use_pcm))
    fused = fuse_multiscale(per_scale, (h, w),
                            flipped_cams=per_scale_flipped if infer_cfg.use_flip else None)
    return fused


def _forward_foreground(model, image_batch, use_pcm):
    out = forward_branch(model, T.Tensor(image_batch), compute_pcm=use_pcm)
    if use_pcm:
        return CamStack(T.Tensor(out.pcm_out.maps.data[:, 1:]), RAW_FOREGROUND)
    return rectify_and_scale(out.cam_raw)


def run_inference(cfg):
    """Export fused stacks and pseudo-label masks for a whole dataset."""
    prefix = "infer"
    ckpt = C.require(cfg, f"{prefix}.checkpoint")
    data_dir = C.require(cfg, f"{prefix}.data")
    out_dir = C.require(cfg, f"{prefix}.out")
    os.makedirs(os.path.join(out_dir, "cams"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pseudo_masks"), exist_ok=True)
    C.dump(cfg, os.path.join(out_dir, "config.json"))
    model, _, _, mode = load_checkpoint(ckpt)
    use_pcm = cfg[f"{prefix}.use_pcm"]
    use_pcm = (mode == "seam") if use_pcm is None else bool(use_pcm)
    infer_cfg = InferenceConfig(alpha=float(cfg[f"{prefix}.alpha"]),
                                scales=C.parse_floats(cfg[f"{prefix}.scales"]),
                                use_flip=bool(cfg[f"{prefix}.flip"]))
    manifest, samples = load_dataset(data_dir)
    from .data import write_pgm
    for sample in samples:
        fused = infer_stack(model, sample.image, infer_cfg, use_pcm)
        classes_present = [int(c) for c in np.flatnonzero(sample.label)]
        export_cam(os.path.join(out_dir, "cams", sample.id), fused, sample.id,
                   classes_present, infer_cfg.alpha)
        mask = pseudo_label(fused, sample.label[None], infer_cfg.alpha)[0]
        write_pgm(os.path.join(out_dir, "pseudo_masks", f"{sample.id}.pgm"),
                  mask.astype(np.uint8))
    return out_dir


# ---------------------------------------------------------------------------
# evaluation

def _sweep_metrics(stacks, gts, labels, alphas, num_classes):
    """Best-alpha sweep plus activation metrics at the best alpha."""
    best_alpha, best_miou, curve = threshold_sweep(stacks, gts, labels, alphas,
                                                   num_classes)
    total = np.zeros((num_classes, 3), dtype=np.int64)
    for stack, gt, label in zip(stacks, gts, labels):
        pred = pseudo_label(stack, np.atleast_2d(label), best_alpha)
        total += confusion_counts(pred[0], gt, num_classes)
    miou_value, per_class = miou(total)
    m_fn, m_fp, degenerate = activation_metrics(total)
    return {
        "best_alpha": best_alpha, "miou": miou_value, "per_class": per_class,
        "m_fn": m_fn, "m_fp": m_fp, "degenerate": degenerate, "curve": curve,
    }


def run_evaluation(cfg):
    """Threshold sweep, per-scale metrics, and equivariance error."""
    ckpt = C.require(cfg, "eval.checkpoint")
    data_dir = C.require(cfg, "eval.data")
    out_dir = C.require(cfg, "eval.out")
    os.makedirs(out_dir, exist_ok=True)
    C.dump(cfg, os.path.join(out_dir, "config.json"))
    model, _, _, mode = load_checkpoint(ckpt)
    use_pcm = cfg["eval.use_pcm"]
    use_pcm = (mode == "seam") if use_pcm is None else bool(use_pcm)
    scales = C.parse_floats(cfg["eval.scales"])
    flip = bool(cfg["eval.flip"])
    alphas = C.parse_floats(cfg["eval.alpha_grid"]) or DEFAULT_ALPHA_GRID

    manifest, samples = load_dataset(data_dir)
    for sample in samples:
        if sample.gt_mask is None:
            raise DataError(f"evaluation needs ground-truth masks; {sample.id} has none")
    num_classes = len(manifest.class_names) + 1
    gts = [s.gt_mask for s in samples]
    labels = [s.label for s in samples]

    fused = [infer_stack(model, s.image,
                         InferenceConfig(scales=scales, use_flip=flip), use_pcm)
             for s in samples]
    headline = _sweep_metrics(fused, gts, labels, alphas, num_classes)

    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["alpha", "miou"])
        for alpha, value in headline["curve"]:
            writer.writerow([repr(float(alpha)), repr(value)])

    per_scale_rows = []
    if bool(cfg["eval.per_scale"]):
        for s in scales:
            single = [infer_stack(model, smp.image,
                                  InferenceConfig(scales=(s,), use_flip=False),
                                  use_pcm)
                      for smp in samples]
            m = _sweep_metrics(single, gts, labels, alphas, num_classes)
            per_scale_rows.append((s, m["best_alpha"], m["miou"], m["m_fn"], m["m_fp"]))
        with open(os.path.join(out_dir, "per_scale.csv"), "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["scale", "best_alpha", "miou", "m_fn", "m_fp"])
            for row in per_scale_rows:
                writer.writerow([repr(float(row[0]))] + [repr(float(v)) for v in row[1:]])

    eq_scales = C.parse_floats(cfg["eval.eq_scales"])
    eq_transforms = [AffineTransform(scale=s) for s in eq_scales]
    eq_err = equivariance_error(model, [s.image for s in samples], eq_transforms,
                                use_pcm=use_pcm)

    report = EvalReport(per_class_iou=headline["per_class"],
                        miou=headline["miou"], m_fn=headline["m_fn"],
                        m_fp=headline["m_fp"], best_alpha=headline["best_alpha"],
                        equivariance_error=eq_err,
                        degenerate_classes=headline["degenerate"])
    with open(os.path.join(out_dir, "report.txt"), "w") as fp:
        fp.write(report.to_text())
    return report


# ---------------------------------------------------------------------------
# ablation table

def run_ablation(cfg):
    """Aggregate eval outputs into a comparison table (text + CSV)."""
    runs = C.require(cfg, "ablate.runs").split(",")
    out_dir = C.require(cfg, "ablate.out")
    os.makedirs(out_dir, exist_ok=True)
    C.dump(cfg, os.path.join(out_dir, "config.json"))
    rows = []
    scale_rows = []
    for run in runs:
        report_path = os.path.join(run, "report.txt")
        if not os.path.exists(report_path):
            raise DataError(f"ablation input {run} has no report.txt")
        with open(report_path) as fp:
            report = EvalReport.from_text(fp.read())
        name = os.path.basename(os.path.normpath(run))
        rows.append((name, report.miou, report.best_alpha, report.m_fn,
                     report.m_fp, report.equivariance_error))
        per_scale = os.path.join(run, "per_scale.csv")
        if os.path.exists(per_scale):
            with open(per_scale, newline="") as fp:
                for rec in list(csv.DictReader(fp)):
                    scale_rows.append((name, float(rec["scale"]), float(rec["miou"]),
                                       float(rec["m_fn"]), float(rec["m_fp"])))
    header = ["run", "miou", "best_alpha", "m_fn", "m_fp", "equivariance_error"]
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    with open(os.path.join(out_dir, "per_scale.csv"), "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["run", "scale", "miou", "m_fn", "m_fp"])
        for row in scale_rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    lines = ["  ".join(header)]
    for row in rows:
        lines.append("  ".join([row[0]] + [f"{v:.6f}" for v in row[1:]]))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fp:
        fp.write(table)
    return table
