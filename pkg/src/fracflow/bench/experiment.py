"""Benchmark orchestration from dataset build through evaluation, plus the
ablation sweep and the missing-piece protocol.

A run directory holds every artifact of one configuration::

    config.json            resolved config and its hash
    dataset/train.npz      fractured instances (bit-stable across runs)
    dataset/test.npz
    latents.npz            encoded training inputs and targets
    prior.ckpt             base flow  (+ prior_loss.csv)
    pairs.jgrp             retarget pairs
    finetuned.ckpt         retargeted flow  (+ finetune_loss.csv)
    recon/<id>.xyz         reconstructions in world coordinates
    manifest.csv           per-instance metrics
    summary.csv            baseline / reconstruction / difference rows
    failure.json           written only when a stage fails

Stages reuse artifacts that already exist, so the CLI can run them one by one.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..flow import Architecture, FlowModel, TrainConfig, load_checkpoint, save_checkpoint, save_loss_trace
from ..flow import sample_reverse, train_flow, train_on_pairs
from ..geometry import DEFAULT_ETA, NormalizationRecord, PointCloud, RigidPose, chamfer_distance, evaluate
from ..geometry import normalize_cloud
from ..io import write_xyz
from ..latent import LatentConfig, LatentError, ShapeCodec
from ..retarget import RetargetConfig, RetargetPair, generate_latents, instance_seed, langevin_rescale
from ..retarget import load_pairs, save_pairs
from ..views import make_camera_ring
from .shapes import CATEGORIES, AssemblyInstance, PerturbationSpec, ShapeSpec, assemble, gen_shape
from .shapes import make_instance, perturb_assembly

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "instance_id", "split", "category", "n_pieces", "n_present", "seed", "config_hash", "status",
    "input_cd", "input_precision", "input_recall", "recon_cd", "recon_precision", "recon_recall",
)
SUMMARY_COLUMNS = ("row", "n", "cd_mean", "cd_std", "precision_mean", "precision_std",
                   "recall_mean", "recall_std", "eta", "seed", "config_hash")
SWEEP_COLUMNS = ("k", "n_reverse", "alpha", "n", "n_failed", "cd_gt", "cd_gt_std", "cd_input",
                 "precision", "recall", "seed", "config_hash")
MISSING_COLUMNS = ("row", "drop_prob", "n", "n_failed", "cd_mean", "cd_std", "precision_mean",
                   "recall_mean", "input_cd_mean", "seed", "config_hash")

# "input": each partial assembly is renormalized into the unit cube and the
# completion is mapped back; "world": benchmark coordinates are used as they
# are (objects are generated inside the unit cube), stray points clipped.
FRAMES = ("input", "world")

# fixed timestamp keeps dataset archives byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ConfigError(ValueError):
    """Bad or inconsistent configuration (a usage error)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_test: int = 50
    categories: tuple = ("revolution", "plate", "box")
    n_pts: int = 2048
    min_pieces: int = 2
    max_pieces: int = 4
    rot_sigma_deg: float = 30.0
    trans_sigma: float = 0.05
    drop_prob: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset sizes must be positive")
        bad = [c for c in self.categories if c not in CATEGORIES]
        if bad or not self.categories:
            raise ConfigError(f"unknown categories {bad}")
        if not 2 <= self.min_pieces <= self.max_pieces:
            raise ConfigError("need 2 <= min_pieces <= max_pieces")


@dataclass(frozen=True)
class CameraConfig:
    n_views: int = 5
    radius: float = 2.5
    elevation_deg: float = 30.0
    resolution: int = 128
    fov_deg: float = 45.0
    splat_px: int = 1


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (256, 256, 256, 256)
    n_freq: int = 16
    max_freq: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=500, learning_rate=1e-3))
    retarget: RetargetConfig = field(default_factory=lambda: RetargetConfig(lr=3e-4, epochs=1000))
    draws_per_instance: int = 8
    frame: str = "input"
    eta: float = DEFAULT_ETA
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.draws_per_instance < 1:
            raise ConfigError("draws_per_instance must be >= 1")
        if self.frame not in FRAMES:
            raise ConfigError(f"frame must be one of {FRAMES}, got {self.frame!r}")

    def codec(self) -> ShapeCodec:
        cam = self.camera
        cameras = make_camera_ring(cam.n_views, cam.radius, cam.elevation_deg,
                                   (cam.resolution, cam.resolution), cam.fov_deg)
        return ShapeCodec(latent=self.latent, cameras=tuple(cameras), splat_px=cam.splat_px)

    def architecture(self) -> Architecture:
        return Architecture(self.latent.dim, self.model.widths, self.model.n_freq, self.model.max_freq)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(base, data, path="config"):
    """Overlay a nested mapping onto the dataclass instance ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(base, name)
        if is_dataclass(current):
            kwargs[name] = _from_plain(current, value, f"{path}.{name}")
        else:
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _from_plain(RunConfig(), data)


def load_config(path) -> RunConfig:
    """Read a YAML or JSON config; keys mirror the :class:`RunConfig` tree."""
    import yaml

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    return config_from_dict(data or {})


# --------------------------------------------------------------------------
# dataset

@dataclass(frozen=True)
class Record:
    instance_id: str
    split: str
    category: str
    shape_seed: int
    instance: AssemblyInstance


@dataclass(frozen=True)
class Dataset:
    train: tuple
    test: tuple

    def __post_init__(self):
        ids = {r.instance_id for r in self.train} & {r.instance_id for r in self.test}
        seeds = {r.shape_seed for r in self.train} & {r.shape_seed for r in self.test}
        if ids or seeds:
            raise ConfigError("train and test splits overlap")


_SPLIT_CODE = {"train": 0, "test": 1}


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def n_workers() -> int:
    raw = os.environ.get("JGPP_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"JGPP_THREADS must be an integer, got {raw!r}") from None
    return min(8, os.cpu_count() or 1)


def _pmap(fn: Callable, items: Sequence) -> list:
    workers = n_workers()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def make_record(cfg: RunConfig, split: str, index: int, drop_prob: Optional[float] = None) -> Record:
    d = cfg.data
    code = _SPLIT_CODE[split]
    shape_seed = _derived_seed(cfg.seed, code, index, 0)
    category = d.categories[index % len(d.categories)]
    complete = gen_shape(ShapeSpec(category, d.n_pts, shape_seed))
    rng = np.random.default_rng(_derived_seed(cfg.seed, code, index, 1))
    n_pieces = int(rng.integers(d.min_pieces, d.max_pieces + 1))
    inst = make_instance(complete, n_pieces, _derived_seed(cfg.seed, code, index, 2),
                         instance_id=f"{split}-{index:04d}", category=category)
    spec = PerturbationSpec(d.rot_sigma_deg, d.trans_sigma, d.drop_prob if drop_prob is None else drop_prob,
                            seed=_derived_seed(cfg.seed, code, index, 3))
    return Record(inst.instance_id, split, category, shape_seed, perturb_assembly(inst, spec))


def build_dataset(cfg: RunConfig, drop_prob: Optional[float] = None) -> Dataset:
    train = _pmap(lambda i: make_record(cfg, "train", i, drop_prob), range(cfg.data.n_train))
    test = _pmap(lambda i: make_record(cfg, "test", i, drop_prob), range(cfg.data.n_test))
    return Dataset(tuple(train), tuple(test))


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_npz(path, arrays: dict) -> None:
    """``np.savez`` equivalent with fixed member timestamps and order."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(np.asarray(arrays[name])))


def _pose_matrix(pose: RigidPose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3], m[:3, 3] = pose.rotation, pose.translation
    return m


def save_split(path, records: Sequence[Record]) -> None:
    arrays = {}
    meta = []
    for k, rec in enumerate(records):
        inst = rec.instance
        sizes = [len(p) for p in inst.pieces]
        arrays[f"{k}_complete"] = inst.complete.points
        arrays[f"{k}_pieces"] = np.concatenate([p.points for p in inst.pieces])
        arrays[f"{k}_gt"] = np.stack([_pose_matrix(p) for p in inst.gt_poses])
        arrays[f"{k}_pred"] = np.stack([_pose_matrix(p) for p in inst.pred_poses])
        meta.append({"id": rec.instance_id, "split": rec.split, "category": rec.category,
                     "shape_seed": rec.shape_seed, "sizes": sizes, "present": list(inst.present)})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_split(path) -> tuple:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        out = []
        for k, m in enumerate(meta):
            bounds = np.cumsum([0, *m["sizes"]])
            pieces_all = z[f"{k}_pieces"]
            pieces = tuple(PointCloud(pieces_all[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))
            gt = tuple(RigidPose(x[:3, :3], x[:3, 3]) for x in z[f"{k}_gt"])
            pred = tuple(RigidPose(x[:3, :3], x[:3, 3]) for x in z[f"{k}_pred"])
            inst = AssemblyInstance(PointCloud(z[f"{k}_complete"]), pieces, gt, pred,
                                    tuple(bool(p) for p in m["present"]), m["id"], m["category"])
            out.append(Record(m["id"], m["split"], m["category"], int(m["shape_seed"]), inst))
    return tuple(out)


# --------------------------------------------------------------------------
# run directory

class RunDir:
    """Owns ``cfg.out_dir`` for the lifetime of a ``with`` block."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self._lock = None

    def __enter__(self) -> "RunDir":
        from filelock import FileLock, Timeout

        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise StageError("setup", f"run directory {self.root} is locked by another process") from None
        self._check_config()
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def _check_config(self):
        path = self.root / "config.json"
        h = self.cfg.config_hash()
        if path.exists():
            old = json.loads(path.read_text(encoding="utf-8")).get("config_hash")
            if old != h:
                raise StageError("setup", f"{self.root} holds a run with config hash {old}, not {h}")
            return
        body = {"config_hash": h, "config": self.cfg.to_dict()}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def record_failure(self, stage: str, exc: BaseException) -> None:
        body = {"stage": stage, "error": f"{type(exc).__name__}: {exc}", "config_hash": self.cfg.config_hash()}
        self.path("failure.json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")


def _stage(run: RunDir, name: str, fn: Callable):
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        log.exception("stage %s failed", name)
        run.record_failure(name, exc)
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


# --------------------------------------------------------------------------
# pipeline pieces

_IDENTITY = NormalizationRecord(1.0, np.zeros(3))


def prepare_input(inst: AssemblyInstance, frame: str = "input") -> tuple[PointCloud, NormalizationRecord]:
    """Assemble with predicted poses and bring into the codec's unit cube.

    The returned record maps codec coordinates back to world coordinates.
    """
    cloud = assemble(inst, use_pred=True)
    if frame == "world":
        return PointCloud(np.clip(cloud.points, 0.0, 1.0)), _IDENTITY
    return normalize_cloud(cloud)


def target_in_input_frame(complete: PointCloud, rec: NormalizationRecord) -> PointCloud:
    """The complete object in the partial's codec frame, clamped to the unit cube."""
    return PointCloud(np.clip(rec.apply_cloud(complete).points, 0.0, 1.0))


def stage_dataset(run: RunDir) -> Dataset:
    tr, te = run.path("dataset", "train.npz"), run.path("dataset", "test.npz")
    if tr.exists() and te.exists():
        return Dataset(load_split(tr), load_split(te))
    ds = build_dataset(run.cfg)
    tr.parent.mkdir(exist_ok=True)
    save_split(tr, ds.train)
    save_split(te, ds.test)
    return ds


def stage_latents(run: RunDir, ds: Dataset) -> dict:
    path = run.path("latents.npz")
    if path.exists():
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    codec = run.cfg.codec()

    def enc(rec: Record):
        partial, nrec = prepare_input(rec.instance, run.cfg.frame)
        return (codec.encode_flat(rec.instance.complete), codec.encode_flat(partial),
                codec.encode_flat(target_in_input_frame(rec.instance.complete, nrec)))

    rows = _pmap(enc, ds.train)
    out = {"complete": np.stack([r[0] for r in rows]).astype(np.float32),
           "partial": np.stack([r[1] for r in rows]).astype(np.float32),
           "target": np.stack([r[2] for r in rows]).astype(np.float32)}
    write_npz(path, out)
    return out


def stage_prior(run: RunDir, latents: dict) -> FlowModel:
    path = run.path("prior.ckpt")
    if path.exists():
        return load_checkpoint(path, expect_dim=run.cfg.latent.dim)
    cfg = run.cfg
    train_cfg = dataclasses.replace(cfg.train, seed=_derived_seed(cfg.seed, 7, cfg.train.seed))
    model = train_flow(latents["complete"], train_cfg, cfg.architecture())
    save_checkpoint(model, path, expect_dim=cfg.latent.dim)
    save_loss_trace(run.path("prior_loss.csv"), model.loss_trace)
    return model


def make_pairs(cfg: RunConfig, base: FlowModel, partial_latents: np.ndarray,
               targets: np.ndarray) -> list[RetargetPair]:
    """Invert every training input once, then draw ``draws_per_instance``
    independent noise mixes of it, each paired with the same target."""
    rc = cfg.retarget
    x0_hat = sample_reverse(base, partial_latents.astype(base.dtype), rc.n_reverse)
    pairs = []
    for d in range(cfg.draws_per_instance):
        for i, (z, x1) in enumerate(zip(x0_hat, targets)):
            x0 = langevin_rescale(z, rc.alpha, instance_seed(_derived_seed(cfg.seed, rc.seed), i, 10 + d))
            pairs.append(RetargetPair(x0, x1))
    return pairs


def stage_finetune(run: RunDir, base: FlowModel, latents: dict) -> FlowModel:
    path = run.path("finetuned.ckpt")
    if path.exists():
        return load_checkpoint(path, expect_dim=run.cfg.latent.dim)
    cfg = run.cfg
    pair_path = run.path("pairs.jgrp")
    if pair_path.exists():
        pairs = load_pairs(pair_path)
    else:
        pairs = make_pairs(cfg, base, latents["partial"], latents["target"])
        save_pairs(pair_path, pairs)
    rc = cfg.retarget
    # epochs count passes over the instances, not over the augmented pair list
    tc = dataclasses.replace(rc.train_config(), epochs=max(1, rc.epochs // cfg.draws_per_instance),
                             seed=_derived_seed(cfg.seed, 8, rc.seed))
    x0 = np.stack([p.x0 for p in pairs])
    x1 = np.stack([p.x1 for p in pairs])
    model = train_on_pairs(base, x0, x1, tc, label="retarget")
    save_checkpoint(model, path, expect_dim=cfg.latent.dim)
    save_loss_trace(run.path("finetune_loss.csv"), model.loss_trace)
    return model


@dataclass
class Outcome:
    record: Record
    partial_world: PointCloud
    recon_world: Optional[PointCloud]
    seed: int

    @property
    def ok(self) -> bool:
        return self.recon_world is not None


def reconstruct_records(cfg: RunConfig, model: FlowModel, records: Sequence[Record],
                        rcfg: Optional[RetargetConfig] = None) -> list[Outcome]:
    """Batched reconstruction; outputs are mapped back to world coordinates."""
    rcfg = rcfg or cfg.retarget
    codec = cfg.codec()
    prepared = _pmap(lambda r: prepare_input(r.instance, cfg.frame), records)
    x1_hat = np.stack(_pmap(lambda p: codec.encode_flat(p[0]), prepared))
    seeds = [_derived_seed(cfg.seed, 9, i) for i in range(len(records))]
    rngs = [np.random.default_rng(s) for s in seeds]
    x1 = generate_latents(model, x1_hat, rcfg, rngs)

    def dec(args):
        x, rng, (partial, nrec) = args
        try:
            return nrec.invert_cloud(codec.decode_flat(x, seed=rng))
        except LatentError:
            return None

    recons = _pmap(dec, list(zip(x1, rngs, prepared)))
    return [Outcome(r, assemble(r.instance, use_pred=True), rc, s)
            for r, rc, s in zip(records, recons, seeds)]


# --------------------------------------------------------------------------
# evaluation and reports

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.9g}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def manifest_rows(cfg: RunConfig, outcomes: Sequence[Outcome]) -> list[dict]:
    h = cfg.config_hash()

    def row(o: Outcome) -> dict:
        inst = o.record.instance
        gt = inst.complete
        mi = evaluate(gt, o.partial_world, cfg.eta)
        if o.ok:
            mo = evaluate(gt, o.recon_world, cfg.eta)
            rec = (mo.cd, mo.precision, mo.recall)
        else:
            rec = (float("nan"),) * 3
        return {"instance_id": o.record.instance_id, "split": o.record.split, "category": o.record.category,
                "n_pieces": inst.n_pieces, "n_present": int(sum(inst.present)), "seed": o.seed,
                "config_hash": h, "status": "ok" if o.ok else "empty_decode",
                "input_cd": mi.cd, "input_precision": mi.precision, "input_recall": mi.recall,
                "recon_cd": rec[0], "recon_precision": rec[1], "recon_recall": rec[2]}

    return _pmap(row, outcomes)


def _ms(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean(v)), float(np.std(v))


def summary_rows(cfg: RunConfig, manifest: Sequence[dict]) -> list[dict]:
    """Summary rows (input vs reconstruction, then their difference) over successful instances.

    Failed reconstructions are excluded from both the baseline and the
    reconstruction row so the difference compares the same instances.
    """
    ok = [r for r in manifest if r["status"] == "ok"]
    h = cfg.config_hash()
    out = []
    cols = {}
    for label, prefix in (("baseline", "input"), ("reconstruction", "recon")):
        row = {"row": label, "n": len(ok), "eta": cfg.eta, "seed": cfg.seed, "config_hash": h}
        for m in ("cd", "precision", "recall"):
            vals = [float(r[f"{prefix}_{m}"]) for r in ok] or [float("nan")]
            cols[(label, m)] = vals
            row[f"{m}_mean"], row[f"{m}_std"] = _ms(vals)
        out.append(row)
    diff = {"row": "difference", "n": len(ok), "eta": cfg.eta, "seed": cfg.seed, "config_hash": h}
    for m in ("cd", "precision", "recall"):
        d = np.asarray(cols[("reconstruction", m)]) - np.asarray(cols[("baseline", m)])
        diff[f"{m}_mean"], diff[f"{m}_std"] = _ms(d)
    out.append(diff)
    return out


def stage_evaluate(run: RunDir, ds: Dataset, model_ft: FlowModel) -> list[dict]:
    cfg = run.cfg
    outcomes = reconstruct_records(cfg, model_ft, ds.test)
    recon_dir = run.path("recon")
    recon_dir.mkdir(exist_ok=True)
    for o in outcomes:
        if o.ok:
            write_xyz(recon_dir / f"{o.record.instance_id}.xyz", o.recon_world)
    rows = manifest_rows(cfg, outcomes)
    write_csv(run.path("manifest.csv"), MANIFEST_COLUMNS, rows)
    write_csv(run.path("summary.csv"), SUMMARY_COLUMNS, summary_rows(cfg, rows))
    return rows


@dataclass
class RunResult:
    root: Path
    manifest: list
    summary: list
    dataset: Dataset = field(repr=False)
    prior: FlowModel = field(repr=False)
    finetuned: FlowModel = field(repr=False)


def run_stages(cfg: RunConfig, upto: str = "eval") -> Optional[RunResult]:
    """Run (or resume) the pipeline up to and including ``upto``."""
    order = ("gen-data", "train-prior", "retarget", "eval")
    if upto not in order:
        raise ConfigError(f"unknown stage {upto!r}")
    stop = order.index(upto)
    with RunDir(cfg) as run:
        ds = _stage(run, "gen-data", lambda: stage_dataset(run))
        if stop == 0:
            return None
        latents = _stage(run, "encode", lambda: stage_latents(run, ds))
        prior = _stage(run, "train-prior", lambda: stage_prior(run, latents))
        if stop == 1:
            return None
        ft = _stage(run, "retarget", lambda: stage_finetune(run, prior, latents))
        if stop == 2:
            return None
        rows = _stage(run, "eval", lambda: stage_evaluate(run, ds, ft))
        return RunResult(run.root, rows, summary_rows(cfg, rows), ds, prior, ft)


def run_experiment(cfg: RunConfig) -> RunResult:
    return run_stages(cfg, "eval")


def load_models(cfg: RunConfig) -> tuple[Dataset, FlowModel]:
    """Dataset and fine-tuned model of a run, building whatever is missing."""
    run_stages(cfg, "retarget")
    root = Path(cfg.out_dir)
    ds = Dataset(load_split(root / "dataset" / "train.npz"), load_split(root / "dataset" / "test.npz"))
    return ds, load_checkpoint(root / "finetuned.ckpt", expect_dim=cfg.latent.dim)


# --------------------------------------------------------------------------
# ablations

def ablation_sweep(cfg: RunConfig, ks: Sequence[float], alphas: Sequence[float],
                   model_ft: Optional[FlowModel] = None, records: Optional[Sequence[Record]] = None,
                   out_dir=None) -> list[dict]:
    """Inference-time grid over (k, alpha) with one fine-tuned model.

    ``cd_input`` is the output-to-input distance, the quantity that shows
    the output copying its input as inversion deepens or noise shrinks.
    """
    if not ks or not alphas:
        raise ConfigError("ks and alphas must be non-empty")
    if model_ft is None or records is None:
        ds, loaded = load_models(cfg)
        model_ft = model_ft or loaded
        records = records if records is not None else ds.test
    out_dir = Path(out_dir or Path(cfg.out_dir) / "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    rows = []
    for k in ks:
        for alpha in alphas:
            rc = dataclasses.replace(cfg.retarget.with_k(k), alpha=float(alpha))
            outcomes = reconstruct_records(cfg, model_ft, records, rc)
            ok = [o for o in outcomes if o.ok]
            gt = [chamfer_distance(o.record.instance.complete, o.recon_world) for o in ok]
            to_in = [chamfer_distance(o.partial_world, o.recon_world) for o in ok]
            pr = [evaluate(o.record.instance.complete, o.recon_world, cfg.eta) for o in ok]
            nan = float("nan")
            rows.append({
                "k": float(k), "n_reverse": rc.n_reverse, "alpha": float(alpha), "n": len(ok),
                "n_failed": len(outcomes) - len(ok),
                "cd_gt": float(np.mean(gt)) if ok else nan, "cd_gt_std": float(np.std(gt)) if ok else nan,
                "cd_input": float(np.mean(to_in)) if ok else nan,
                "precision": float(np.mean([m.precision for m in pr])) if ok else nan,
                "recall": float(np.mean([m.recall for m in pr])) if ok else nan,
                "seed": cfg.seed, "config_hash": h,
            })
    write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    plot_sweep(rows, out_dir)
    return rows


def plot_sweep(rows: Sequence[dict], out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    ks = sorted({r["k"] for r in rows})
    alphas = sorted({r["alpha"] for r in rows})
    paths = []
    for x_key, series_key, xs, series, name in (("k", "alpha", ks, alphas, "cd_vs_k.png"),
                                                 ("alpha", "k", alphas, ks, "cd_vs_alpha.png")):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for s in series:
            pts = sorted((r[x_key], r["cd_gt"], r["cd_input"]) for r in rows if r[series_key] == s)
            x = [p[0] for p in pts]
            axes[0].plot(x, [p[1] for p in pts], marker="o", label=f"{series_key}={s:g}")
            axes[1].plot(x, [p[2] for p in pts], marker="o", label=f"{series_key}={s:g}")
        for ax, title in zip(axes, ("CD to ground truth", "CD to input")):
            ax.set_xlabel(x_key)
            ax.set_title(title)
            if x_key == "k":
                ax.set_xscale("log")
            ax.grid(alpha=0.3)
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / name
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def missing_piece_eval(cfg: RunConfig, drop_prob: float = 0.2, model_ft: Optional[FlowModel] = None,
                       out_dir=None) -> list[dict]:
    """Reconstruct the test split twice, with every piece present and with
    pieces dropped at ``drop_prob``. Poses are identical between the two
    because drops and pose noise come from separate streams."""
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigError("drop_prob must lie in [0, 1)")
    if model_ft is None:
        _, model_ft = load_models(cfg)
    h = cfg.config_hash()
    rows = []
    for label, p in (("complete", 0.0), (f"{round(100 * drop_prob):d}% missing", drop_prob)):
        records = _pmap(lambda i: make_record(cfg, "test", i, p), range(cfg.data.n_test))
        outcomes = reconstruct_records(cfg, model_ft, records)
        man = manifest_rows(cfg, outcomes)
        ok = [r for r in man if r["status"] == "ok"]
        cd_m, cd_s = _ms([r["recon_cd"] for r in ok] or [float("nan")])
        rows.append({"row": label, "drop_prob": p, "n": len(ok), "n_failed": len(man) - len(ok),
                     "cd_mean": cd_m, "cd_std": cd_s,
                     "precision_mean": _ms([r["recon_precision"] for r in ok] or [float("nan")])[0],
                     "recall_mean": _ms([r["recon_recall"] for r in ok] or [float("nan")])[0],
                     "input_cd_mean": _ms([r["input_cd"] for r in ok] or [float("nan")])[0],
                     "seed": cfg.seed, "config_hash": h})
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "missing_pieces.csv", MISSING_COLUMNS, rows)
    return rows
