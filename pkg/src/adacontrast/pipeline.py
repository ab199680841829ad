"""Two-stage training orchestration, configuration, checkpoints, run logs.

Stage 1 (pretrain): instance discrimination between student and teacher
relational distributions over mined views (global + local paths) plus
supervised Dice+CE on the labeled sub-batch.

Stage 2 (finetune): supervised Dice+CE, confident pseudo-label CE,
class-contrast on confident unlabeled pixels, and center-contrast pulling
labeled pixel features toward their allocated sphere centers, with the
center allocation recomputed from moving-average class means every
iteration.

Every random draw derives from (seed, purpose, iteration, ids), so a resumed
run replays the exact same stream and checkpointed training is bitwise
reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import centers as centers_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import losses as losses_mod
from . import model as model_mod
from .numerics import RngStream, stable_softmax
from .schedule import TemperatureSchedule, temperature_at

CHECKPOINT_MAGIC = b"ACPP"
CHECKPOINT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8"), "|u1": np.dtype("|u1")}


class ConfigError(ValueError):
    """Bad or unknown configuration contents."""


class DataError(ValueError):
    """Dataset missing or incompatible with the run."""


class NonFiniteLossError(ArithmeticError):
    """A loss became NaN/Inf; carries the offending iteration."""

    def __init__(self, iteration: int, component: str):
        super().__init__(f"non-finite {component} at iteration {iteration}")
        self.iteration = iteration
        self.component = component


class VersionMismatchError(RuntimeError):
    """Checkpoint written by an incompatible format version."""


class CorruptFileError(RuntimeError):
    """Checkpoint failed structural or checksum validation."""


# --------------------------------------------------------------- config


@dataclass(frozen=True)
class ScheduleConfig:
    """JSON-facing description of one temperature schedule."""

    kind: str = "cosine"
    tau_minus: float = 0.1
    tau_plus: float = 1.0
    period_multiplier: float = 1.0
    step_count: int = 4

    def build(self, total_iters: int, seed: int) -> TemperatureSchedule:
        return TemperatureSchedule(
            kind=self.kind,
            tau_minus=self.tau_minus,
            tau_plus=self.tau_plus,
            total_iters=max(total_iters, 1),
            period_multiplier=self.period_multiplier,
            seed=seed,
            step_count=self.step_count,
        )


@dataclass(frozen=True)
class TrainConfig:
    """One JSON document configuring a training stage."""

    stage: str = "pretrain"
    seed: int = 0
    # data
    image_size: int = 64
    num_classes: int = 4
    dataset_size: int = 200
    labeled_fraction: float = 0.10
    val_fraction: float = 0.15
    data_seed: int = 1
    dataset_path: str | None = None
    # model
    base_width: int = 16
    depth: int = 3
    latent_dim: int = 128
    local_grid: int = 4
    input_mean: float = 0.146   # dataset profile mean/std; identity = (0, 1)
    input_scale: float = 0.152
    # optimizer
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_decay: float = 0.99
    # loop
    iterations: int = 1000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    mined_views: int = 4
    # temperatures
    schedule_instance: ScheduleConfig = field(default_factory=ScheduleConfig)
    schedule_class_contrast: ScheduleConfig = field(default_factory=ScheduleConfig)
    schedule_center_contrast: ScheduleConfig = field(default_factory=ScheduleConfig)
    teacher_fixed_temperature: bool = True
    # contrastive knobs
    confidence_threshold: float = 0.75
    center_term_weight: float = 0.2        # weight of the center term inside the loss
    positives_per_anchor: int = 3
    queries_per_class: int = 64
    contrast_pixels: int = 512             # pooled unlabeled pixels per iteration
    center_pixels_per_class: int = 64      # labeled pixels per class per iteration
    mean_update_rate: float = 0.1
    # loss mixing weights
    weight_supervised: float = 1.0
    weight_instance_global: float = 1.0
    weight_instance_local: float = 1.0
    weight_pseudo_ce: float = 1.0
    weight_class_contrast: float = 1.0
    weight_center_contrast: float = 1.0
    # io
    out_dir: str | None = None
    centers_path: str | None = None
    init_checkpoint: str | None = None
    log_every: int = 50
    metrics_samples: int = 6

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name in ("learning_rate", "momentum", "ema_decay", "labeled_fraction",
                     "val_fraction", "mean_update_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.image_size % (2 ** self.depth):
            raise ConfigError("image_size must be divisible by 2^depth")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(TrainConfig)}
        unknown = set(doc) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for sched_key in (
            "schedule_instance",
            "schedule_class_contrast",
            "schedule_center_contrast",
        ):
            if sched_key in kwargs:
                sub = kwargs[sched_key]
                if not isinstance(sub, dict):
                    raise ConfigError(f"{sched_key} must be an object")
                sub_known = {f.name for f in dataclasses.fields(ScheduleConfig)}
                sub_unknown = set(sub) - sub_known
                if sub_unknown:
                    raise ConfigError(
                        f"unknown keys in {sched_key}: {sorted(sub_unknown)}"
                    )
                kwargs[sched_key] = ScheduleConfig(**sub)
        return TrainConfig(**kwargs)

    @staticmethod
    def from_json(path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}") from exc
        return TrainConfig.from_dict(doc)

    def arch(self) -> model_mod.ArchitectureConfig:
        return model_mod.ArchitectureConfig(
            in_channels=1,
            base_width=self.base_width,
            depth=self.depth,
            num_classes=self.num_classes,
            latent_dim=self.latent_dim,
            local_grid=self.local_grid,
            input_mean=self.input_mean,
            input_scale=self.input_scale,
        )


# ------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    """Named tensors plus the config/iteration/RNG snapshot."""

    version: int
    tensors: dict          # name -> ndarray (float64 / int64 / uint8)
    config: dict
    iteration: int
    stage: str
    rng_state: dict

    def network(self, prefix: str = "student/") -> model_mod.SegmentationNetwork:
        cfg = TrainConfig.from_dict(self.config)
        net = model_mod.SegmentationNetwork(
            arch=cfg.arch(),
            params={
                name[len(prefix):]: np.array(t)
                for name, t in self.tensors.items()
                if name.startswith(prefix)
            },
            init_seed=int(self.rng_state.get("seed", 0)),
        )
        return net


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f8"
    if kind in ("i", "b"):
        return "<i8" if kind == "i" else "|u1"
    if kind == "u":
        return "|u1"
    raise ValueError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Serialize: magic, u32 version, u64 header length, JSON header,
    raw little-endian payloads in header order, trailing CRC-32."""
    names = sorted(ckpt.tensors)
    table = []
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "tensors": table,
        "config": ckpt.config,
        "iteration": int(ckpt.iteration),
        "stage": ckpt.stage,
        "rng": ckpt.rng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    body = (
        CHECKPOINT_MAGIC
        + np.array(ckpt.version, dtype="<u4").tobytes()
        + np.array(len(header_bytes), dtype="<u8").tobytes()
        + header_bytes
        + b"".join(payloads)
    )
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body + np.array(crc, dtype="<u4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    """Inverse of save_checkpoint; validates magic, version, and CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError("bad magic or truncated file")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    stored_crc = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if (zlib.crc32(blob[:-4]) & 0xFFFFFFFF) != stored_crc:
        raise CorruptFileError("CRC-32 mismatch")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header_end = 16 + header_len
    if header_end > len(blob) - 4:
        raise CorruptFileError("header length exceeds file size")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from exc
    payload = blob[header_end:-4]
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise CorruptFileError(f"tensor {entry['name']!r} exceeds payload")
        tensors[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype=dt).reshape(shape).copy()
        )
    return Checkpoint(
        version=version,
        tensors=tensors,
        config=header["config"],
        iteration=int(header["iteration"]),
        stage=header["stage"],
        rng_state=header["rng"],
    )


def save_centers(path: str, cc: centers_mod.ClassCenters) -> None:
    """Write class centers as a minimal checkpoint container."""
    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        tensors={"centers/psi": cc.centers},
        config={"K": cc.K, "d": cc.d, "tau_unif": cc.tau_unif},
        iteration=cc.iterations,
        stage="centers",
        rng_state={},
    )
    save_checkpoint(path, ckpt)


def load_centers(path: str) -> centers_mod.ClassCenters:
    ckpt = load_checkpoint(path)
    psi = ckpt.tensors.get("centers/psi")
    if psi is None:
        raise DataError("checkpoint does not contain class centers")
    return centers_mod.ClassCenters(
        K=int(ckpt.config["K"]),
        d=int(ckpt.config["d"]),
        centers=psi,
        tau_unif=float(ckpt.config["tau_unif"]),
        iterations=ckpt.iteration,
    )


# --------------------------------------------------------------- run log


LOG_COLUMNS = (
    "iteration",
    "loss_total",
    "loss_supervised",
    "loss_instance_global",
    "loss_instance_local",
    "loss_pseudo_ce",
    "loss_class_contrast",
    "loss_center_contrast",
    "tau_instance",
    "tau_class_contrast",
    "tau_center_contrast",
    "allocation",
    "val_mean_dice",
    "alignment",
    "divergence",
    "nn_error",
)


class RunLog:
    """Fixed-header CSV accumulator; one row per logging interval."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.rows = []

    def add(self, **fields):
        unknown = set(fields) - set(LOG_COLUMNS)
        if unknown:
            raise ValueError(f"unknown log fields: {sorted(unknown)}")
        self.rows.append({col: fields.get(col, "") for col in LOG_COLUMNS})

    def save(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
            writer.writeheader()
            writer.writerows(self.rows)

    def series(self, column: str):
        return [row[column] for row in self.rows if row[column] != ""]


# ---------------------------------------------------------- data plumbing


def load_or_generate_data(config: TrainConfig):
    """Return (labeled, unlabeled, val) sample lists for this config."""
    if config.dataset_path is not None:
        return _load_dataset_dir(config)
    scene = data_mod.SceneConfig(
        image_size=config.image_size,
        num_classes=config.num_classes,
        seed=config.data_seed,
    )
    samples = data_mod.generate_dataset(scene, config.dataset_size)
    return data_mod.split_dataset(
        samples, config.labeled_fraction, config.val_fraction, config.data_seed
    )


def save_dataset_dir(out_dir: str, config: TrainConfig) -> dict:
    """Write images/labels tensor files plus a JSON manifest; returns manifest."""
    import os

    scene = data_mod.SceneConfig(
        image_size=config.image_size,
        num_classes=config.num_classes,
        seed=config.data_seed,
    )
    samples = data_mod.generate_dataset(scene, config.dataset_size)
    labeled, unlabeled, val = data_mod.split_dataset(
        samples, config.labeled_fraction, config.val_fraction, config.data_seed
    )
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(
        os.path.join(out_dir, "images.ckpt"),
        Checkpoint(CHECKPOINT_VERSION, {"images": images}, {}, 0, "dataset", {}),
    )
    save_checkpoint(
        os.path.join(out_dir, "labels.ckpt"),
        Checkpoint(CHECKPOINT_VERSION, {"labels": labels}, {}, 0, "dataset", {}),
    )
    freqs = data_mod.measure_frequencies(samples, config.num_classes)
    manifest = {
        "image_size": config.image_size,
        "num_classes": config.num_classes,
        "dataset_size": config.dataset_size,
        "data_seed": config.data_seed,
        "labeled_ids": sorted(s.id for s in labeled),
        "unlabeled_ids": sorted(s.id for s in unlabeled),
        "val_ids": sorted(s.id for s in val),
        "measured_frequencies": [float(f) for f in freqs],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _load_dataset_dir(config: TrainConfig):
    import os

    root = config.dataset_path
    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        images = load_checkpoint(os.path.join(root, "images.ckpt")).tensors["images"]
        labels = load_checkpoint(os.path.join(root, "labels.ckpt")).tensors["labels"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset from {root!r}: {exc}") from exc
    if images.shape[0] != manifest["dataset_size"]:
        raise DataError("manifest/tensor size mismatch")
    if manifest["image_size"] != config.image_size or (
        manifest["num_classes"] != config.num_classes
    ):
        raise DataError("dataset geometry does not match the config")
    samples = [
        data_mod.SegmentationSample(image=images[i], labels=labels[i], id=i)
        for i in range(images.shape[0])
    ]
    by_id = {s.id: s for s in samples}
    labeled = [by_id[i] for i in manifest["labeled_ids"]]
    unlabeled = [by_id[i] for i in manifest["unlabeled_ids"]]
    val = [by_id[i] for i in manifest["val_ids"]]
    return labeled, unlabeled, val


# ------------------------------------------------------------- training


def _build_pair(config: TrainConfig) -> tuple:
    student = model_mod.init_network(config.arch(), seed=config.seed)
    teacher = model_mod.init_network(config.arch(), seed=config.seed)
    for name in teacher.params:
        teacher.params[name] = student.params[name].copy()
    pair = model_mod.StudentTeacher(
        student=student, teacher=teacher, ema_decay=config.ema_decay
    )
    return pair, model_mod.SgdState()


def _pair_from_checkpoint(ckpt: Checkpoint, config: TrainConfig):
    pair = model_mod.StudentTeacher(
        student=ckpt.network("student/"),
        teacher=ckpt.network("teacher/"),
        ema_decay=config.ema_decay,
    )
    state = model_mod.SgdState(
        velocities={
            name[len("velocity/"):]: np.array(t)
            for name, t in ckpt.tensors.items()
            if name.startswith("velocity/")
        }
    )
    return pair, state


def _snapshot(
    config: TrainConfig,
    pair,
    state,
    iteration: int,
    stage: str,
    means: centers_mod.EmpiricalMeans | None = None,
    cc: centers_mod.ClassCenters | None = None,
    assignment: centers_mod.Assignment | None = None,
) -> Checkpoint:
    tensors = {}
    for name, t in pair.student.params.items():
        tensors[f"student/{name}"] = t.copy()
    for name, t in pair.teacher.params.items():
        tensors[f"teacher/{name}"] = t.copy()
    for name, t in state.velocities.items():
        tensors[f"velocity/{name}"] = t.copy()
    if means is not None:
        tensors["means/values"] = means.means.copy()
        tensors["means/initialized"] = means.initialized.astype(np.uint8)
    if cc is not None:
        tensors["centers/psi"] = cc.centers.copy()
    if assignment is not None:
        tensors["assignment/pi"] = np.asarray(assignment.pi, dtype=np.int64)
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        tensors=tensors,
        config=config.to_dict(),
        iteration=iteration,
        stage=stage,
        rng_state={"seed": config.seed, "iteration": iteration},
    )


def _check_finite(value: float, iteration: int, component: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(iteration, component)
    return float(value)


def _augment_batch(samples, ids, stream: RngStream, noise_sigma: float):
    out = []
    for sid in ids:
        out.append(
            data_mod.augment(samples[sid], stream.substream("aug", sid), noise_sigma)
        )
    return out


def run_pretrain(
    config: TrainConfig,
    log: RunLog | None = None,
    resume_from: Checkpoint | None = None,
    stop_at: int | None = None,
) -> Checkpoint:
    """Instance-discrimination pretraining plus supervised Dice+CE.

    `stop_at` ends the run early (after that many iterations) while keeping
    the schedules anchored to config.iterations, so a stopped-and-resumed
    run retraces the exact iterations of a straight-through one.
    """
    if config.stage != "pretrain":
        raise ConfigError("config.stage must be 'pretrain'")
    labeled, unlabeled, val = load_or_generate_data(config)
    if len(unlabeled) < config.mined_views:
        raise DataError("unlabeled pool smaller than the mined-view count")
    labeled_by_id = {s.id: s for s in labeled}
    root = RngStream(config.seed)
    sched = config.schedule_instance.build(config.iterations, config.seed)

    if resume_from is not None:
        pair, state = _pair_from_checkpoint(resume_from, config)
        start = resume_from.iteration
    else:
        pair, state = _build_pair(config)
        start = 0

    arch = config.arch()
    G2 = arch.local_grid ** 2
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    for it in range(start, end):
        tau_s = temperature_at(sched, it)
        tau_t = sched.tau_plus if config.teacher_fixed_temperature else tau_s

        it_stream = root.substream("pretrain", it)
        gen = it_stream.substream("batch").generator()
        lab_ids = [
            labeled[int(i)].id
            for i in gen.choice(
                len(labeled), size=min(config.batch_labeled, len(labeled)),
                replace=False,
            )
        ]
        un_pick = gen.choice(
            len(unlabeled), size=min(config.batch_unlabeled, len(unlabeled)),
            replace=False,
        )
        un_ids = [unlabeled[int(i)].id for i in un_pick]
        views = data_mod.make_view_batch(
            unlabeled, un_ids, config.mined_views, it_stream.substream("views")
        )
        lab_batch = _augment_batch(
            labeled_by_id, lab_ids, it_stream.substream("lab"), noise_sigma=0.02
        )

        # teacher passes (no gradients)
        _, t_heads2 = model_mod.forward(pair.teacher, views.x2)
        _, t_heads3 = model_mod.forward(pair.teacher, views.x3)

        grads_total = {n: np.zeros_like(p) for n, p in pair.student.params.items()}
        B = views.x1.shape[0]

        loss_ig = 0.0
        loss_il = 0.0
        for b in range(B):
            logits_b, heads_b, cache_b = model_mod.forward_single(
                pair.student, views.x1[b], with_cache=True
            )
            out_grads = {}
            # global path
            u_s = losses_mod.relational_distribution(
                heads_b["w_global"], t_heads3.v_global, tau_s
            )
            u_t = losses_mod.relational_distribution(
                t_heads2.w_global[b], t_heads3.v_global, tau_t
            )
            lv = losses_mod.instance_discrimination_loss(u_s, u_t)
            loss_ig += lv.value / B
            glog = lv.grads["student_logits"]
            scale_g = config.weight_instance_global / B
            out_grads["w_global"] = (
                scale_g * (glog @ t_heads3.v_global) / tau_s
            )
            # local path: one distribution per grid cell
            gl = np.zeros_like(heads_b["w_local"])
            for g in range(G2):
                u_s_l = losses_mod.relational_distribution(
                    heads_b["w_local"][g], t_heads3.v_local[:, g], tau_s
                )
                u_t_l = losses_mod.relational_distribution(
                    t_heads2.w_local[b][g], t_heads3.v_local[:, g], tau_t
                )
                lv_l = losses_mod.instance_discrimination_loss(u_s_l, u_t_l)
                loss_il += lv_l.value / (B * G2)
                gl[g] = lv_l.grads["student_logits"] @ t_heads3.v_local[:, g] / tau_s
            out_grads["w_local"] = gl * (config.weight_instance_local / (B * G2))
            g_par = model_mod.backward_single(pair.student, cache_b, out_grads)
            for name, gval in g_par.items():
                grads_total[name] += gval

        loss_sup = 0.0
        for s in lab_batch:
            logits_s, _, cache_s = model_mod.forward_single(
                pair.student, s.image, with_cache=True
            )
            probs = stable_softmax(logits_s, axis=0)
            lv = losses_mod.dice_ce_loss(probs, s.labels)
            loss_sup += lv.value / len(lab_batch)
            g_par = model_mod.backward_single(
                pair.student,
                cache_s,
                {
                    "logits": lv.grads["logits"]
                    * (config.weight_supervised / len(lab_batch))
                },
            )
            for name, gval in g_par.items():
                grads_total[name] += gval

        w_ig = config.weight_instance_global * loss_ig
        w_il = config.weight_instance_local * loss_il
        w_sup = config.weight_supervised * loss_sup
        total = _check_finite(w_ig + w_il + w_sup, it, "total")

        model_mod.sgd_step(
            pair.student, grads_total, state,
            lr=config.learning_rate, momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        model_mod.ema_update(pair)

        if log is not None and (it % config.log_every == 0 or it == end - 1):
            report = _quick_metrics(config, pair, val, root, it)
            log.add(
                iteration=it,
                loss_total=total,
                loss_supervised=w_sup,
                loss_instance_global=w_ig,
                loss_instance_local=w_il,
                tau_instance=tau_s,
                val_mean_dice=report["val_mean_dice"],
                alignment=report["alignment"],
            )
    return _snapshot(config, pair, state, end, "pretrain")


def run_finetune(
    config: TrainConfig,
    pretrained: Checkpoint,
    cc: centers_mod.ClassCenters,
    log: RunLog | None = None,
    resume_from: Checkpoint | None = None,
    stop_at: int | None = None,
) -> Checkpoint:
    """Adaptive center-contrast fine-tuning on top of a pretrained checkpoint.

    `stop_at` ends the run early without re-anchoring the schedules; see
    run_pretrain.
    """
    if config.stage != "finetune":
        raise ConfigError("config.stage must be 'finetune'")
    if cc.K != config.num_classes:
        raise ConfigError("centers class count does not match the config")
    if cc.d != config.latent_dim:
        raise ConfigError("centers dimension does not match latent_dim")
    labeled, unlabeled, val = load_or_generate_data(config)
    labeled_by_id = {s.id: s for s in labeled}
    unlabeled_by_id = {s.id: s for s in unlabeled}
    root = RngStream(config.seed)
    sched_cc = config.schedule_class_contrast.build(config.iterations, config.seed)
    sched_ctr = config.schedule_center_contrast.build(config.iterations, config.seed)

    if resume_from is not None:
        pair, state = _pair_from_checkpoint(resume_from, config)
        start = resume_from.iteration
        means = centers_mod.EmpiricalMeans(
            K=config.num_classes,
            d=config.latent_dim,
            eta=config.mean_update_rate,
            means=np.array(resume_from.tensors["means/values"]),
            initialized=resume_from.tensors["means/initialized"].astype(bool),
        )
    else:
        pair, state = _pair_from_checkpoint(pretrained, config)
        start = 0
        means = centers_mod.EmpiricalMeans(
            K=config.num_classes, d=config.latent_dim, eta=config.mean_update_rate
        )

    H = W = config.image_size
    assignment = None
    if resume_from is not None and "assignment/pi" in resume_from.tensors:
        assignment = centers_mod.Assignment(
            pi=tuple(int(i) for i in resume_from.tensors["assignment/pi"])
        )
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    for it in range(start, end):
        tau_cc = temperature_at(sched_cc, it)
        tau_ctr = temperature_at(sched_ctr, it)
        it_stream = root.substream("finetune", it)
        gen = it_stream.substream("batch").generator()
        lab_ids = [
            labeled[int(i)].id
            for i in gen.choice(
                len(labeled), size=min(config.batch_labeled, len(labeled)),
                replace=False,
            )
        ]
        un_ids = [
            unlabeled[int(i)].id
            for i in gen.choice(
                len(unlabeled), size=min(config.batch_unlabeled, len(unlabeled)),
                replace=False,
            )
        ]
        lab_batch = _augment_batch(
            labeled_by_id, lab_ids, it_stream.substream("lab"), noise_sigma=0.02
        )
        # student and teacher each get an independent view; the teacher's
        # predictions are realigned into the student's frame, so the pseudo
        # labels exert cross-view consistency pressure
        un_batch, un_teacher_views = [], []
        for sid in un_ids:
            s_view, s_idx = data_mod.augment_with_params(
                unlabeled_by_id[sid], it_stream.substream("unlab-s", sid), 0.02
            )
            t_view, t_idx = data_mod.augment_with_params(
                unlabeled_by_id[sid], it_stream.substream("unlab-t", sid), 0.02
            )
            un_batch.append(s_view)
            un_teacher_views.append((t_view, t_idx, s_idx))

        # ---- forward passes
        lab_caches = []
        lab_dense = []
        loss_sup = 0.0
        lab_grads_logits = []
        for s in lab_batch:
            logits_s, heads_s, cache_s = model_mod.forward_single(
                pair.student, s.image, with_cache=True
            )
            probs = stable_softmax(logits_s, axis=0)
            lv = losses_mod.dice_ce_loss(probs, s.labels)
            loss_sup += lv.value / len(lab_batch)
            lab_grads_logits.append(
                lv.grads["logits"] * (config.weight_supervised / len(lab_batch))
            )
            lab_caches.append(cache_s)
            lab_dense.append(heads_s["dense_reps"].reshape(config.latent_dim, -1).T)

        un_caches = []
        un_dense = []
        un_grads_logits = []
        pseudo_labels = []
        pseudo_conf = []
        loss_pce = 0.0
        for s, (t_view, t_idx, s_idx) in zip(un_batch, un_teacher_views):
            t_logits, _, _ = model_mod.forward_single(pair.teacher, t_view.image)
            t_probs = stable_softmax(t_logits, axis=0)
            # teacher frame -> base frame -> student frame
            t_probs = data_mod.apply_dihedral(
                t_probs, data_mod.DIHEDRAL_INVERSE[t_idx]
            )
            t_probs = np.ascontiguousarray(data_mod.apply_dihedral(t_probs, s_idx))
            logits_s, heads_s, cache_s = model_mod.forward_single(
                pair.student, s.image, with_cache=True
            )
            s_probs = stable_softmax(logits_s, axis=0)
            lv = losses_mod.pseudo_label_ce_loss(
                s_probs, t_probs, config.confidence_threshold
            )
            loss_pce += lv.value / max(len(un_batch), 1)
            un_grads_logits.append(
                lv.grads["student_logits"]
                * (config.weight_pseudo_ce / max(len(un_batch), 1))
            )
            un_caches.append(cache_s)
            un_dense.append(heads_s["dense_reps"].reshape(config.latent_dim, -1).T)
            pseudo_labels.append(np.argmax(t_probs, axis=0) + 1)
            pseudo_conf.append(np.max(t_probs, axis=0))

        # ---- class contrast on confident unlabeled pixels
        loss_cc = 0.0
        un_grads_dense = [np.zeros_like(dn) for dn in un_dense]
        pool_feats, pool_labels, pool_where = [], [], []
        for b in range(len(un_batch)):
            keep = np.flatnonzero(pseudo_conf[b].ravel() >= config.confidence_threshold)
            for idx in keep:
                pool_where.append((b, int(idx)))
            pool_feats.append(un_dense[b][keep])
            pool_labels.append(pseudo_labels[b].ravel()[keep])
        if pool_where:
            feats = np.concatenate(pool_feats, axis=0)
            labs = np.concatenate(pool_labels, axis=0)
            if feats.shape[0] > config.contrast_pixels:
                pgen = it_stream.substream("pool").generator()
                keep = np.sort(
                    pgen.choice(feats.shape[0], size=config.contrast_pixels, replace=False)
                )
                feats = feats[keep]
                labs = labs[keep]
                pool_where = [pool_where[int(i)] for i in keep]
            sets = losses_mod.select_query_key_sets(
                feats, labs, config.queries_per_class, it_stream.substream("qsets")
            )
            if sets.classes:
                lv = losses_mod.class_contrast_loss(sets, tau_cc)
                loss_cc = lv.value
                wcc = config.weight_class_contrast
                for c, entry in sets.classes.items():
                    gq = lv.grads[f"class{c}_queries"] * wcc
                    for row, pos in enumerate(entry.query_indices):
                        b, idx = pool_where[int(pos)]
                        un_grads_dense[b][idx] += gq[row]
                    gmem = losses_mod.renormalized_mean_backward(
                        entry.pos_key,
                        entry.full_mean_norm,
                        entry.full_indices.size,
                        lv.grads[f"class{c}_pos_key"] * wcc,
                    )
                    for pos in entry.full_indices:
                        b, idx = pool_where[int(pos)]
                        un_grads_dense[b][idx] += gmem

        # ---- center contrast on labeled pixels + means/allocation upkeep
        loss_ctr = 0.0
        lab_grads_dense = [np.zeros_like(dn) for dn in lab_dense]
        sgen = it_stream.substream("strat").generator()
        feat_rows, feat_labels, feat_ids, feat_where = [], [], [], []
        for b, s in enumerate(lab_batch):
            flat_labels = s.labels.ravel()
            for c in np.unique(flat_labels):
                pix = np.flatnonzero(flat_labels == c)
                if pix.size > config.center_pixels_per_class:
                    pix = np.sort(
                        sgen.choice(pix, size=config.center_pixels_per_class, replace=False)
                    )
                for idx in pix:
                    feat_where.append((b, int(idx)))
                    feat_ids.append(s.id * H * W + int(idx))
                feat_rows.append(lab_dense[b][pix])
                feat_labels.append(flat_labels[pix])
        feats = np.concatenate(feat_rows, axis=0)
        labs = np.concatenate(feat_labels, axis=0).astype(int)
        means = centers_mod.update_empirical_means(means, feats, labs)
        if means.all_initialized():
            assignment = centers_mod.allocate_centers(cc, means)
            anchor_centers = np.stack(
                [assignment.center_for_class(int(c), cc) for c in labs]
            )
            batch = losses_mod.CenterContrastBatch(
                pixel_ids=np.asarray(feat_ids, dtype=np.int64),
                features=feats,
                labels=labs,
                anchor_centers=anchor_centers,
                lambda_a=config.center_term_weight,
                tau=tau_ctr,
                positives_per_anchor=config.positives_per_anchor,
            )
            lv = losses_mod.center_contrast_loss(
                batch, it_stream.substream("contrast")
            )
            loss_ctr = lv.value
            gf = lv.grads["features"] * config.weight_center_contrast
            for row, (b, idx) in enumerate(feat_where):
                lab_grads_dense[b][idx] += gf[row]

        # ---- backward + step
        grads_total = {n: np.zeros_like(p) for n, p in pair.student.params.items()}
        for b in range(len(lab_batch)):
            out_grads = {"logits": lab_grads_logits[b]}
            if np.any(lab_grads_dense[b]):
                out_grads["dense_reps"] = lab_grads_dense[b].T.reshape(
                    config.latent_dim, H, W
                )
            g_par = model_mod.backward_single(pair.student, lab_caches[b], out_grads)
            for name, gval in g_par.items():
                grads_total[name] += gval
        for b in range(len(un_batch)):
            out_grads = {"logits": un_grads_logits[b]}
            if np.any(un_grads_dense[b]):
                out_grads["dense_reps"] = un_grads_dense[b].T.reshape(
                    config.latent_dim, H, W
                )
            g_par = model_mod.backward_single(pair.student, un_caches[b], out_grads)
            for name, gval in g_par.items():
                grads_total[name] += gval

        w_sup = config.weight_supervised * loss_sup
        w_pce = config.weight_pseudo_ce * loss_pce
        w_cc = config.weight_class_contrast * loss_cc
        w_ctr = config.weight_center_contrast * loss_ctr
        total = _check_finite(w_sup + w_pce + w_cc + w_ctr, it, "total")

        model_mod.sgd_step(
            pair.student, grads_total, state,
            lr=config.learning_rate, momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        model_mod.ema_update(pair)

        if log is not None and (it % config.log_every == 0 or it == end - 1):
            report = _quick_metrics(config, pair, val, root, it, means, cc, assignment)
            log.add(
                iteration=it,
                loss_total=total,
                loss_supervised=w_sup,
                loss_pseudo_ce=w_pce,
                loss_class_contrast=w_cc,
                loss_center_contrast=w_ctr,
                tau_class_contrast=tau_cc,
                tau_center_contrast=tau_ctr,
                allocation="-".join(str(i) for i in assignment.pi)
                if assignment is not None
                else "",
                val_mean_dice=report["val_mean_dice"],
                alignment=report["alignment"],
                divergence=report["divergence"],
                nn_error=report["nn_error"],
            )
    return _snapshot(config, pair, state, end, "finetune", means, cc, assignment)


# ------------------------------------------------------------ evaluation


def _val_feature_sets(net, samples, config: TrainConfig, stream: RngStream,
                      pixels_per_class: int = 64):
    """Per-class dense features over a sample list (subsampled pixels)."""
    feats, labels = [], []
    for s in samples:
        _, heads, _ = model_mod.forward_single(net, s.image)
        dense = heads["dense_reps"].reshape(config.latent_dim, -1).T
        flat = s.labels.ravel()
        for c in range(1, config.num_classes + 1):
            pix = np.flatnonzero(flat == c)
            if pix.size == 0:
                continue
            if pix.size > pixels_per_class:
                gen = stream.substream("valpix", s.id, int(c)).generator()
                pix = np.sort(gen.choice(pix, size=pixels_per_class, replace=False))
            feats.append(dense[pix])
            labels.append(np.full(pix.size, c))
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


def _class_mean_directions(feats, labels, num_classes: int):
    means = []
    for c in range(1, num_classes + 1):
        rows = feats[labels == c]
        if rows.shape[0] == 0:
            return None
        m = rows.sum(axis=0)
        n = np.linalg.norm(m)
        if n < 1e-12:
            return None
        means.append(m / n)
    return np.stack(means)


def _quick_metrics(config, pair, val, root, it, means=None, cc=None, assignment=None):
    """Cheap per-log-interval metrics on a validation subset."""
    subset = val[: config.metrics_samples]
    net = pair.student
    preds = []
    for s in subset:
        logits, _, _ = model_mod.forward_single(net, s.image)
        preds.append(np.argmax(logits, axis=0) + 1)
    per_dice, _, _ = eval_mod.segmentation_scores(
        preds, [s.labels for s in subset], config.num_classes
    )
    out = {
        "val_mean_dice": float(np.mean(per_dice)),
        "alignment": "",
        "divergence": "",
        "nn_error": "",
    }
    mstream = root.substream("metrics", it)
    try:
        out["alignment"] = eval_mod.alignment_metric(
            net, subset, config.num_classes, mstream,
            num_pairs=2, pixels_per_class=64,
        )
    except eval_mod.MissingClassError:
        pass
    feats, labels = _val_feature_sets(net, subset, config, mstream)
    mean_dirs = _class_mean_directions(feats, labels, config.num_classes)
    if mean_dirs is not None:
        out["divergence"] = eval_mod.divergence_metric(mean_dirs)
    if cc is not None and assignment is not None:
        try:
            out["nn_error"] = eval_mod.nn_classifier_error(
                feats, labels, cc, assignment
            )
        except eval_mod.MissingClassError:
            pass
    return out


def evaluate_checkpoint(
    ckpt: Checkpoint,
    samples,
    cc: centers_mod.ClassCenters | None = None,
    pixels_per_class: int = 128,
) -> eval_mod.MetricsReport:
    """Full metrics for a checkpoint's student network over a sample list.

    Divergence comes from class mean directions of the evaluated features.
    The NN error uses the checkpoint's stored centers/assignment when
    present, else the provided centers with an allocation recomputed from
    the evaluated features.
    """
    config = TrainConfig.from_dict(ckpt.config)
    net = ckpt.network("student/")
    stream = RngStream(config.seed).substream("eval", ckpt.iteration)

    preds = [
        np.argmax(model_mod.forward_single(net, s.image)[0], axis=0) + 1
        for s in samples
    ]
    per_dice, per_asd, missing = eval_mod.segmentation_scores(
        preds, [s.labels for s in samples], config.num_classes
    )
    alignment = eval_mod.alignment_metric(
        net, samples, config.num_classes, stream,
        num_pairs=2, pixels_per_class=pixels_per_class,
    )
    feats, labels = _val_feature_sets(net, samples, config, stream, pixels_per_class)
    mean_dirs = _class_mean_directions(feats, labels, config.num_classes)
    if mean_dirs is None:
        raise DataError("a class is missing from the evaluation split")
    divergence = eval_mod.divergence_metric(mean_dirs)

    if cc is None and "centers/psi" in ckpt.tensors:
        cc = centers_mod.ClassCenters(
            K=config.num_classes,
            d=config.latent_dim,
            centers=ckpt.tensors["centers/psi"],
            tau_unif=float("nan"),
        )
    nn_err = float("nan")
    nn_err_px = float("nan")
    if cc is not None:
        if "assignment/pi" in ckpt.tensors:
            assignment = centers_mod.Assignment(
                pi=tuple(int(i) for i in ckpt.tensors["assignment/pi"])
            )
        else:
            ev_means = centers_mod.EmpiricalMeans(
                K=config.num_classes, d=config.latent_dim, eta=1.0,
                means=mean_dirs.copy(),
                initialized=np.ones(config.num_classes, dtype=bool),
            )
            assignment = centers_mod.allocate_centers(cc, ev_means)
        nn_err = eval_mod.nn_classifier_error(feats, labels, cc, assignment)
        nn_err_px = eval_mod.nn_classifier_error(
            feats, labels, cc, assignment, pixel_weighted=True
        )

    finite_asd = [a for a in per_asd if np.isfinite(a)]
    return eval_mod.MetricsReport(
        per_class_dice=per_dice,
        per_class_asd=per_asd,
        mean_dice=float(np.mean(per_dice)),
        mean_asd=float(np.mean(finite_asd)) if finite_asd else float("nan"),
        asd_missing=missing,
        alignment=float(alignment),
        divergence=float(divergence),
        nn_error=float(nn_err),
        nn_error_pixel_weighted=float(nn_err_px),
        iteration=ckpt.iteration,
    )
