"""Two-stage joint motion/appearance optimization.

Stage 1 fits the feature tensor, the Gaussian parameter decoder, and per-frame
motion updates (pose encoder excluded: the pose feature is zero). Between
stages the per-frame UV positional maps are regenerated from the corrected
motions and cached. Stage 2 trains the pose encoder from scratch and
fine-tunes the decoder with the feature tensor and motion updates frozen.

One frame per step (monocular video has one view per time instant); frames are
visited in a seeded shuffled order per epoch; every step is deterministic for
a fixed seed and thread count.
"""

import dataclasses
import json
import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .appearance import (DecoderParams, EncoderParams, NetConfig,
                         combine_features, decode, encode_pose, init_decoder,
                         init_encoder, init_feature_tensor, load_network,
                         save_network)
from .autodiff import Tape
from .dataio import Dataset, Frame, load_dataset
from .gaussians import (GaussianCloud, SCALE_FLOOR, apply_properties,
                        init_cloud, load_cloud, save_cloud)
from .losses import LossWeights, append_metrics, l1_rgb, psnr, ssim
from .rasterizer import (Camera, project, project_backward, render,
                         render_backward)
from .rotations import axis_angle_to_matrix, geodesic_angle
from .template import (Pose, SkinnedTemplate, SurfaceSamples, UvPositionalMap,
                       build_uv_map, forward_kinematics, lbs, lbs_jacobians,
                       load_template, sample_surface, save_template,
                       uv_to_pixel)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss exceeded the divergence guard or went non-finite."""


@dataclass
class MotionUpdate:
    """Learnable per-frame corrections to the initial pose estimates."""
    dtheta: np.ndarray  # [F, J, 3]
    dtrans: np.ndarray  # [F, 3]

    @staticmethod
    def zeros(n_frames, n_joints):
        return MotionUpdate(np.zeros((n_frames, n_joints, 3)),
                            np.zeros((n_frames, 3)))

    def corrected(self, frame: Frame) -> Pose:
        f = frame.index
        return Pose(frame.pose.theta + self.dtheta[f],
                    frame.pose.trans + self.dtrans[f])


@dataclass
class TrainConfig:
    stage1_epochs: int = 200   # published schedule; desk_preset uses 50+50
    stage2_epochs: int = 200
    lr_decoder: float = 3e-3
    lr_feature: float = 5e-4
    lr_motion: float = 5e-3
    lr_encoder: float = 3e-3   # stage 2 trains a new module; same as decoder
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    uv_res: tuple = (64, 64)
    n_points: int = 3000
    init_scale: float | None = None
    seed: int = 0
    motion_opt: bool = True
    stage2_motion_opt: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    divergence_factor: float = 10.0
    divergence_patience: int = 5

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        for name in ("lr_decoder", "lr_feature", "lr_encoder"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_motion < 0:
            raise ValueError("lr_motion must be nonnegative")

    @staticmethod
    def desk_preset(**overrides):
        """Short schedule for small scenes: 50+50 epochs."""
        base = dict(stage1_epochs=50, stage2_epochs=50)
        base.update(overrides)
        return TrainConfig(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        net = dict(d["net"])
        for k in ("encoder_widths", "trunk_dims"):
            net[k] = tuple(net[k])
        d["net"] = NetConfig(**net)
        d["uv_res"] = tuple(d["uv_res"])
        d["background"] = tuple(d["background"])
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    label: str = ""


def adam_step(state: AdamState, params, grads):
    """Standard bias-corrected Adam update, in place on the ``params`` arrays.

    A non-finite gradient aborts the whole step (logged with the group label);
    returns True when the update was applied.
    """
    for name in params:
        if not np.isfinite(grads[name]).all():
            log.warning("non-finite gradient in group '%s' (param '%s'); "
                        "step aborted", state.label, name)
            return False
    for name in sorted(params):
        g = np.asarray(grads[name], dtype=float)
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


# ---------------------------------------------------------------------------
# avatar model (shared forward for training, rendering, evaluation)
# ---------------------------------------------------------------------------

@dataclass
class AvatarModel:
    template: SkinnedTemplate
    samples: SurfaceSamples
    cloud: GaussianCloud            # initialization state; offsets/colors/scales
    feature: np.ndarray             # [H, W, C] optimizable feature tensor
    decoder: DecoderParams
    encoder: EncoderParams | None
    cfg: NetConfig
    uv_res: tuple

    @property
    def scale_gain(self):
        return (self.cloud.base_scale - SCALE_FLOOR) / np.log(2.0)

    def uv_map(self, pose: Pose) -> UvPositionalMap:
        jt = forward_kinematics(self.template, pose)
        posed = lbs(self.samples.position, self.samples.weights, jt)
        return build_uv_map(self.samples, posed, self.uv_res)

    def predict(self, pose: Pose) -> GaussianCloud:
        """Pose-conditioned cloud: network predictions installed on the cloud."""
        pose_feature = None
        if self.encoder is not None:
            pose_feature = encode_pose(self.uv_map(pose).positions,
                                       self.encoder, tape=None)
        feats = combine_features(pose_feature, self.feature, self.samples.uv,
                                 self.cfg.upsample, tape=None,
                                 mode=self.cfg.combine)
        p_off, p_col, p_scl = decode(feats, self.decoder, tape=None)
        return apply_properties(self.cloud, p_off, p_col, p_scl)

    def render_frame(self, pose: Pose, camera: Camera,
                     background=(0.0, 0.0, 0.0), record=False):
        cloud = self.predict(pose)
        jt = forward_kinematics(self.template, pose)
        posed = lbs(cloud.canonical_positions(), cloud.skin_weights, jt)
        splats = project(posed, cloud.scale, cloud.color, camera)
        return render(splats, (camera.width, camera.height), background,
                      record=record)


def init_model(dataset: Dataset, config: TrainConfig) -> AvatarModel:
    samples = sample_surface(dataset.template, config.n_points,
                             seed=config.seed, uv_res=config.uv_res)
    cloud = init_cloud(samples, init_scale=config.init_scale)
    F = init_feature_tensor(config.uv_res, config.net.feature_channels,
                            seed=config.seed + 1,
                            std=config.net.feature_init_std)
    decoder = init_decoder(config.net, seed=config.seed + 2)
    return AvatarModel(dataset.template, samples, cloud, F, decoder,
                       encoder=None, cfg=config.net, uv_res=config.uv_res)


# ---------------------------------------------------------------------------
# the differentiable per-frame forward
# ---------------------------------------------------------------------------

def frame_loss(model: AvatarModel, frame: Frame, dtheta, dtrans, stage,
               weights: LossWeights, background, tape: Tape | None = None,
               train_motion=False, feature_trainable=None):
    """Forward pass for one frame; optionally records the whole computation.

    Returns (loss_value, aux) where aux carries the render output and the
    individual loss components. With a tape, aux["loss_var"] is the recorded
    scalar to hand to tape_backward; registered leaf names are ``dec.*``,
    ``enc.*``, ``F`` and (when ``train_motion``) ``motion.dtheta`` /
    ``motion.dtrans``.
    """
    if feature_trainable is None:
        feature_trainable = stage == 1
    samples = model.samples
    cloud = model.cloud

    if tape is not None and train_motion:
        v_dth = tape.leaf(dtheta, name="motion.dtheta")
        v_dtr = tape.leaf(dtrans, name="motion.dtrans")
    else:
        v_dth, v_dtr = dtheta, dtrans
    pose_hat = Pose(frame.pose.theta + ad.value_of(v_dth),
                    frame.pose.trans + ad.value_of(v_dtr))
    jt = forward_kinematics(model.template, pose_hat)

    # decoder / encoder / feature tensor leaves
    dec_vars = {k: tape.leaf(v, name=f"dec.{k}")
                for k, v in sorted(model.decoder.weights.items())} \
        if tape is not None else model.decoder.weights
    if tape is not None and feature_trainable:
        F_var = tape.leaf(model.feature, name="F")
    else:
        F_var = model.feature

    pose_feature = None
    if model.encoder is not None:
        posed_samples = lbs(samples.position, samples.weights, jt)
        uvmap = build_uv_map(samples, posed_samples, model.uv_res)
        uv_in = uvmap.positions
        if tape is not None and train_motion:
            pix = uv_to_pixel(samples.uv, model.uv_res)

            def uv_vjp(g):
                g_samp = g[pix[:, 0], pix[:, 1]]
                jac = lbs_jacobians(samples.position, samples.weights, jt)
                g_th = np.einsum("nrka,nr->ka", jac["theta"], g_samp)
                return (g_th, g_samp.sum(axis=0))

            uv_in = ad.custom(tape, [v_dth, v_dtr], uvmap.positions, uv_vjp)
        enc_vars = {k: tape.leaf(v, name=f"enc.{k}")
                    for k, v in sorted(model.encoder.weights.items())} \
            if tape is not None else model.encoder.weights
        pose_feature = encode_pose(uv_in, model.encoder, tape,
                                   weight_vars=enc_vars)

    feats = combine_features(pose_feature, F_var, samples.uv,
                             model.cfg.upsample, tape, mode=model.cfg.combine)
    p_off, p_col, p_scl = decode(feats, model.decoder, tape,
                                 weight_vars=dec_vars)

    color = ad.sigmoid(tape, p_col)
    scale = ad.add(tape, ad.scale(tape, ad.softplus(tape, p_scl),
                                  model.scale_gain), SCALE_FLOOR)

    # repose through the skinning Jacobians
    pts_val = cloud.base_pos + ad.value_of(p_off)
    posed_val = lbs(pts_val, cloud.skin_weights, jt)

    def repose_vjp(g):
        jac = lbs_jacobians(pts_val, cloud.skin_weights, jt)
        g_off = np.einsum("nrc,nr->nc", jac["points"], g)
        g_th = np.einsum("nrka,nr->ka", jac["theta"], g)
        return (g_off, g_th, g.sum(axis=0))

    posed = ad.custom(tape, [p_off, v_dth, v_dtr], posed_val, repose_vjp)

    # splatting + image losses as one recorded node
    cam = frame.camera
    splats = project(ad.value_of(posed), ad.value_of(scale),
                     ad.value_of(color), cam)
    out = render(splats, (cam.width, cam.height), background,
                 record=tape is not None)
    mask = None
    if frame.mask is not None:
        mask = frame.mask | (out.alpha > 0.0)
    l1_val, l1_grad = l1_rgb(out.rgb, frame.image, mask)
    ssim_val, ssim_grad = ssim(out.rgb, frame.image)
    img_val = weights.rgb * l1_val + weights.ssim * (1.0 - ssim_val)

    def img_vjp(g):
        dimg = float(g) * (weights.rgb * l1_grad - weights.ssim * ssim_grad)
        gr = render_backward(out, splats, dimg)
        return project_backward(splats, gr["mean"], gr["sigma"], gr["color"])

    img_node = ad.custom(tape, [posed, scale, color], img_val, img_vjp)

    # regularizers act on the raw predictions: a zero scale prediction is the
    # calibrated base scale, so its L2 pull anchors splat sizes there instead
    # of letting the image term inflate them to blur away misalignment
    reg_offset = ad.scale(tape, ad.l2_mean(tape, p_off), weights.offset)
    reg_scale = ad.scale(tape, ad.l2_mean(tape, p_scl), weights.scale)
    aux = {
        "out": out,
        "l1": l1_val,
        "ssim": ssim_val,
        "ssim_loss": 1.0 - ssim_val,
        "psnr": psnr(out.rgb, frame.image),
        "reg_offset": float(ad.value_of(reg_offset)) / max(weights.offset, 1e-300),
        "reg_scale": float(ad.value_of(reg_scale)) / max(weights.scale, 1e-300),
    }
    terms = [img_node, reg_offset, reg_scale]
    if stage == 1:
        reg_f = ad.scale(tape, ad.l2_mean(tape, F_var), weights.feature)
        aux["reg_f"] = float(ad.value_of(reg_f)) / max(weights.feature, 1e-300)
        terms.append(reg_f)
    else:
        reg_p = ad.scale(tape, ad.l2_mean(tape, pose_feature),
                         weights.pose_feature)
        aux["reg_p"] = float(ad.value_of(reg_p)) / max(weights.pose_feature, 1e-300)
        terms.append(reg_p)
    loss = ad.add_n(tape, terms)
    aux["loss_var"] = loss if tape is not None else None
    return float(ad.value_of(loss)), aux


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _epoch_order(seed, stage, epoch, n):
    return np.random.default_rng([seed, stage, epoch]).permutation(n)


def _run_epochs(dataset, model, motion, config, stage, epochs, train_motion,
                metrics_path, epoch_offset=0):
    w = config.weights
    bg = np.asarray(config.background, dtype=float)
    dec_adam = AdamState(config.lr_decoder, config.adam_beta1,
                         config.adam_beta2, config.adam_eps, label="decoder")
    feat_adam = AdamState(config.lr_feature, config.adam_beta1,
                          config.adam_beta2, config.adam_eps, label="feature")
    enc_adam = AdamState(config.lr_encoder, config.adam_beta1,
                         config.adam_beta2, config.adam_eps, label="encoder")
    mot_adam = AdamState(config.lr_motion, config.adam_beta1,
                         config.adam_beta2, config.adam_eps, label="motion")

    train_idx = dataset.split_indices("train")
    initial_loss = None
    bad_epochs = 0
    for epoch in range(epochs):
        order = _epoch_order(config.seed, stage, epoch, len(train_idx))
        sums = {}
        for k in order:
            f = train_idx[int(k)]
            frame = dataset.frames[f]
            tape = Tape()
            loss_val, aux = frame_loss(
                model, frame, motion.dtheta[f], motion.dtrans[f], stage, w, bg,
                tape=tape, train_motion=train_motion)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at stage {stage} epoch {epoch} frame {f}")
            grads = tape.backward(aux["loss_var"])

            adam_step(dec_adam, model.decoder.weights,
                      {k[4:]: v for k, v in grads.items() if k.startswith("dec.")})
            if stage == 1:
                adam_step(feat_adam, {"F": model.feature}, {"F": grads["F"]})
            if model.encoder is not None:
                adam_step(enc_adam, model.encoder.weights,
                          {k[4:]: v for k, v in grads.items()
                           if k.startswith("enc.")})
            if train_motion and config.lr_motion > 0:
                adam_step(mot_adam,
                          {f"{f}.dtheta": motion.dtheta[f],
                           f"{f}.dtrans": motion.dtrans[f]},
                          {f"{f}.dtheta": grads["motion.dtheta"],
                           f"{f}.dtrans": grads["motion.dtrans"]})

            sums["loss"] = sums.get("loss", 0.0) + loss_val
            for key in ("l1", "ssim_loss", "reg_f", "reg_p", "reg_offset",
                        "reg_scale", "ssim"):
                if key in aux:
                    sums[key] = sums.get(key, 0.0) + aux[key]
            p = aux["psnr"]
            sums["psnr"] = sums.get("psnr", 0.0) + (p if np.isfinite(p) else 99.0)

        n = len(train_idx)
        record = {k: v / n for k, v in sums.items()}
        record["epoch"] = epoch_offset + epoch
        record["stage"] = stage
        if metrics_path is not None:
            append_metrics(metrics_path, record)
        log.info("stage %d epoch %d: loss %.5f l1 %.5f psnr %.2f",
                 stage, epoch, record["loss"], record["l1"], record["psnr"])

        if initial_loss is None:
            initial_loss = record["loss"]
        if record["loss"] > config.divergence_factor * max(initial_loss, 1e-12):
            bad_epochs += 1
            if bad_epochs >= config.divergence_patience:
                raise TrainingDiverged(
                    f"stage {stage}: loss {record['loss']:.4g} stayed above "
                    f"{config.divergence_factor}x the initial "
                    f"{initial_loss:.4g} for {bad_epochs} consecutive epochs")
        else:
            bad_epochs = 0
    return model, motion


def train_stage1(dataset: Dataset, config: TrainConfig, out_dir=None):
    """Stage 1: fit feature tensor, decoder, and (optionally) motion updates.

    Returns (model, motion); when ``out_dir`` is given a checkpoint directory
    is written there including the metrics log.
    """
    model = init_model(dataset, config)
    motion = MotionUpdate.zeros(len(dataset), dataset.n_joints)
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
    model, motion = _run_epochs(dataset, model, motion, config, stage=1,
                                epochs=config.stage1_epochs,
                                train_motion=config.motion_opt,
                                metrics_path=metrics_path)
    if out_dir is not None:
        save_checkpoint(out_dir, model, motion, config, stage=1,
                        dataset_root=dataset.root)
    return model, motion


def rebuild_uv_maps(dataset: Dataset, model: AvatarModel, motion: MotionUpdate,
                    out_dir=None):
    """Regenerate every frame's UV positional map at its corrected pose.

    Cached to ``out_dir``/uvmaps for stage 2 when a directory is given.
    Returns {frame index: UvPositionalMap}.
    """
    maps = {}
    for frame in dataset.frames:
        maps[frame.index] = model.uv_map(motion.corrected(frame))
    if out_dir is not None:
        cache = os.path.join(out_dir, "uvmaps")
        os.makedirs(cache, exist_ok=True)
        for i, m in maps.items():
            np.savez(os.path.join(cache, f"{i:04d}.npz"), positions=m.positions,
                     mask=m.mask, sample_index=m.sample_index)
    return maps


def train_stage2(dataset: Dataset, model: AvatarModel, motion: MotionUpdate,
                 config: TrainConfig, out_dir=None, stage1_metrics=None):
    """Stage 2: train the pose encoder, fine-tune the decoder; the feature
    tensor and motion updates stay frozen (unless config.stage2_motion_opt)."""
    if model.encoder is None:
        model.encoder = init_encoder(config.net, seed=config.seed + 3)
    # bake the stage-1 corrections into the frame poses so the encoder sees
    # corrected motion even though the updates are frozen
    corrected = Dataset(
        frames=[Frame(f.image, f.mask, f.camera, motion.corrected(f), f.index)
                for f in dataset.frames],
        template=dataset.template, template_path=dataset.template_path,
        splits=dataset.splits, gt_poses=dataset.gt_poses, root=dataset.root,
        meta=dataset.meta)
    motion2 = MotionUpdate.zeros(len(dataset), dataset.n_joints)

    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        if stage1_metrics and os.path.exists(stage1_metrics):
            shutil.copyfile(stage1_metrics, metrics_path)

    model, motion2 = _run_epochs(
        corrected, model, motion2, config, stage=2,
        epochs=config.stage2_epochs, train_motion=config.stage2_motion_opt,
        metrics_path=metrics_path, epoch_offset=config.stage1_epochs)

    total = MotionUpdate(motion.dtheta + motion2.dtheta,
                         motion.dtrans + motion2.dtrans)
    if out_dir is not None:
        save_checkpoint(out_dir, model, total, config, stage=2,
                        dataset_root=dataset.root)
    return model, total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _atomic_savez(path, **arrays):
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def save_checkpoint(out_dir, model: AvatarModel, motion: MotionUpdate,
                    config: TrainConfig, stage, dataset_root=""):
    os.makedirs(out_dir, exist_ok=True)
    save_template(model.template, os.path.join(out_dir, "template.tmpl"))
    _atomic_savez(os.path.join(out_dir, "samples.npz"),
                  tri=model.samples.tri, bary=model.samples.bary,
                  uv=model.samples.uv, weights=model.samples.weights,
                  position=model.samples.position)
    save_cloud(model.cloud, os.path.join(out_dir, "cloud.npz"))
    save_network(os.path.join(out_dir, "network.npz"), model.feature,
                 model.decoder, model.encoder)
    _atomic_savez(os.path.join(out_dir, "motion.npz"),
                  dtheta=motion.dtheta, dtrans=motion.dtrans)
    manifest = {"format_version": CHECKPOINT_VERSION, "stage": stage,
                "dataset_root": str(dataset_root),
                "config": config.to_dict()}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def load_checkpoint(ckpt_dir):
    """Returns (model, motion, config, manifest)."""
    with open(os.path.join(ckpt_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{manifest['format_version']}")
    config = TrainConfig.from_dict(manifest["config"])
    template = load_template(os.path.join(ckpt_dir, "template.tmpl"))
    with np.load(os.path.join(ckpt_dir, "samples.npz")) as z:
        samples = SurfaceSamples(z["tri"], z["bary"], z["uv"], z["weights"],
                                 z["position"])
    cloud = load_cloud(os.path.join(ckpt_dir, "cloud.npz"))
    F, decoder, encoder = load_network(os.path.join(ckpt_dir, "network.npz"),
                                       expect_cfg=config.net)
    with np.load(os.path.join(ckpt_dir, "motion.npz")) as z:
        motion = MotionUpdate(z["dtheta"], z["dtrans"])
    model = AvatarModel(template, samples, cloud, F, decoder, encoder,
                        config.net, tuple(config.uv_res))
    return model, motion, config, manifest


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_pose_for(dataset: Dataset, motion: MotionUpdate | None, index,
                  prefer_gt=True):
    """Pose used at evaluation time: corrected pose for training frames,
    ground truth (when stored) for held-out frames, else the initial estimate."""
    frame = dataset.frames[index]
    if index in dataset.splits.get("train", []) and motion is not None:
        return motion.corrected(frame)
    if prefer_gt and dataset.gt_poses is not None:
        return dataset.gt_poses[index]
    return frame.pose


def evaluate_split(model: AvatarModel, dataset: Dataset, split,
                   motion: MotionUpdate | None = None,
                   background=(0.0, 0.0, 0.0)):
    """Per-frame and mean PSNR / SSIM / L1 over a split."""
    rows = []
    for i in dataset.split_indices(split):
        frame = dataset.frames[i]
        pose = eval_pose_for(dataset, motion, i)
        out = model.render_frame(pose, frame.camera, background)
        l1_val, _ = l1_rgb(out.rgb, frame.image)
        rows.append({"frame": i, "psnr": psnr(out.rgb, frame.image),
                     "ssim": ssim(out.rgb, frame.image)[0], "l1": l1_val})
    if not rows:
        return {"split": split, "rows": [], "mean": {}}
    mean = {k: float(np.mean([r[k] for r in rows if np.isfinite(r[k])]))
            for k in ("psnr", "ssim", "l1")}
    return {"split": split, "rows": rows, "mean": mean}


def pose_error_report(dataset: Dataset, motion: MotionUpdate | None,
                      split="train"):
    """Geodesic per-joint rotation error and translation error against the
    stored ground-truth poses, before and after motion optimization."""
    if dataset.gt_poses is None:
        return None
    idx = dataset.split_indices(split)
    rot_init, rot_opt, tr_init, tr_opt = [], [], [], []
    for i in idx:
        frame = dataset.frames[i]
        gt = dataset.gt_poses[i]
        est = motion.corrected(frame) if motion is not None else frame.pose
        for j in range(dataset.n_joints):
            Rg = axis_angle_to_matrix(gt.theta[j])
            rot_init.append(geodesic_angle(axis_angle_to_matrix(frame.pose.theta[j]), Rg))
            rot_opt.append(geodesic_angle(axis_angle_to_matrix(est.theta[j]), Rg))
        tr_init.append(np.linalg.norm(frame.pose.trans - gt.trans))
        tr_opt.append(np.linalg.norm(est.trans - gt.trans))
    return {
        "split": split,
        "rot_err_initial": float(np.mean(rot_init)),
        "rot_err_optimized": float(np.mean(rot_opt)),
        "trans_err_initial": float(np.mean(tr_init)),
        "trans_err_optimized": float(np.mean(tr_opt)),
    }
