"""Training loop, checkpoints, evaluation and prediction pipelines."""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .backbone import CISUNet, build_model
from .config import DataConfig, ModelConfig, TrainConfig, config_to_dict
from .inference import labels_from_logits, sliding_window_predict
from .loss import LossWeights, dice_ce
from .metrics import aggregate, evaluate_case, is_undefined

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    iteration: int
    state_dict: dict
    optimizer_state: dict | None = None
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str | Path, model: CISUNet, optimizer=None, iteration: int = 0,
                    rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": config_to_dict(model.cfg),
        "iteration": iteration,
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise TrainingError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {version!r} in {path}")
    return Checkpoint(ModelConfig(**payload["model_config"]), payload["iteration"],
                      payload["state_dict"], payload.get("optimizer_state"),
                      payload.get("rng_state"), version)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> CISUNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = CISUNet(ckpt.model_config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def make_optimizer(model, train: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=train.learning_rate,
                             weight_decay=train.weight_decay, betas=(0.9, 0.999), eps=1e-8)


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    label: np.ndarray
    spacing: tuple


def load_cases(data_dir, data_cfg: DataConfig) -> list[Case]:
    cases = []
    for cid in D.list_cases(data_dir):
        img_p, lbl_p = D.case_paths(data_dir, cid)
        img, lbl = D.preprocess(D.read_volume(img_p), D.read_volume(lbl_p, is_label=True),
                                data_cfg.target_spacing, data_cfg.intensity_window)
        cases.append(Case(cid, img.data, lbl.data, tuple(lbl.spacing)))
    return cases


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("iterations must increase")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def sample_batch(cases: list[Case], train: TrainConfig, data_cfg: DataConfig,
                 rng: np.random.Generator):
    images, labels = [], []
    while len(images) < train.batch_size:
        case = cases[int(rng.integers(len(cases)))]
        n = min(data_cfg.samples_per_volume, train.batch_size - len(images))
        for p in D.crop_pos_neg(case.image, case.label, train.patch_size, data_cfg.pos_neg_ratio,
                                rng, num_samples=n, source=case.case_id):
            images.append(p.image)
            labels.append(p.label)
    x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(labels).astype(np.int64))
    return x, y


def foreground_dsc(model, case: Case, patch_size, num_classes: int) -> float:
    """Mean DSC over foreground classes present in the ground truth."""
    logits = sliding_window_predict(case.image, model, patch_size)
    pred = labels_from_logits(logits)
    m = evaluate_case(pred, case.label, case.spacing,
                      class_ids=[c for c in range(1, num_classes) if (case.label == c).any()])
    return float(np.mean([m.dsc[c] for c in m.class_ids])) if m.class_ids else 1.0


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data_cfg: DataConfig,
          cases: list[Case], out_dir: str | Path | None = None,
          val_cases: list[Case] | None = None, iterations: int | None = None):
    """Optimize a fresh network on ``cases``; returns ``(model, log)``.

    Checkpoints go to ``out_dir`` every ``checkpoint_every`` iterations and at
    the end, alongside ``train_log.jsonl``.
    """
    if not cases:
        raise TrainingError("empty dataset")
    for case in cases:
        hi = int(case.label.max())
        if hi >= model_cfg.num_classes:
            raise TrainingError(f"case {case.case_id} has label {hi} >= num_classes "
                                f"{model_cfg.num_classes}")
    iterations = train_cfg.iterations if iterations is None else iterations
    rng = seed_everything(train_cfg.rng_seed)
    model = build_model(model_cfg, seed=train_cfg.rng_seed)
    model.train()
    opt = make_optimizer(model, train_cfg)
    weights = LossWeights(train_cfg.lambda_dice, train_cfg.lambda_ce)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").unlink(missing_ok=True)
    tlog = TrainingLog(path=out / "train_log.jsonl" if out is not None else None)

    for it in range(1, iterations + 1):
        x, y = sample_batch(cases, train_cfg, data_cfg, rng)
        loss = dice_ce(model(x), y, weights)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        record = {"iteration": it, "loss": float(loss.item()), "time": time.time()}
        if val_cases and it % train_cfg.validate_every == 0:
            scores = [foreground_dsc(model, c, train_cfg.patch_size, model_cfg.num_classes)
                      for c in val_cases]
            record["val_dsc"] = float(np.mean(scores))
            model.train()
        tlog.append(record)
        log.info("iter %d loss %.4f", it, record["loss"])
        if out is not None and (it % train_cfg.checkpoint_every == 0 or it == iterations):
            save_checkpoint(out / "checkpoint.pt", model, opt, it,
                            rng_state={"numpy": rng.bit_generator.state,
                                       "torch": torch.random.get_rng_state()})
    model.eval()
    return model, tlog


def predict_volume(model: CISUNet, image: D.Volume, data_cfg: DataConfig, patch_size,
                   overlap: float = 0.5) -> D.Volume:
    """Resample, window, sliding-window predict, argmax, map back to the input grid."""
    pre = D.normalize_intensity(D.resample(image, data_cfg.target_spacing), data_cfg.intensity_window)
    logits = sliding_window_predict(pre.data, model, patch_size, overlap)
    lbl = D.Volume(labels_from_logits(logits), pre.affine, is_label=True)
    return D.restore_geometry(lbl, image)


def format_value(v: float, digits: int = 4) -> str:
    return "†" if is_undefined(v) else f"{v:.{digits}f}"


def render_report(cases_metrics, class_ids) -> str:
    """Tab-separated report: one block of per-case rows, one block of cohort rows.

    Undefined surface distances (class missing from the prediction) print as
    a dagger; the cohort block reports how many cases were skipped.
    """
    lines = ["# cisunet evaluation report v1", "[cases]", "case\tclass_id\tclass\tdsc\tmsd_mm"]
    for m in cases_metrics:
        for c in class_ids:
            lines.append(f"{m.case_id}\t{c}\t{D.class_name(c)}\t{format_value(m.dsc[c])}\t"
                         f"{format_value(m.msd_mm[c])}")
    summary = aggregate(cases_metrics, class_ids)
    lines += ["[cohort]", "class_id\tclass\tdsc_mean\tmsd_mean_mm\tmsd_skipped"]
    for c in class_ids:
        lines.append(f"{c}\t{D.class_name(c)}\t{format_value(summary.mean_dsc[c])}\t"
                     f"{format_value(summary.mean_msd[c])}\t{summary.undefined_count[c]}")
    skipped = sum(summary.undefined_count.values())
    lines.append(f"-\tAverage\t{format_value(summary.average_dsc)}\t"
                 f"{format_value(summary.average_msd)}\t{skipped}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, list[list[str]]]:
    """Split a report back into its ``cases`` and ``cohort`` rows (headers dropped)."""
    blocks: dict[str, list[list[str]]] = {}
    current = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            blocks[current] = []
            continue
        if current is not None:
            blocks[current].append(line.split("\t"))
    return {k: v[1:] for k, v in blocks.items()}


def evaluate(model: CISUNet | None, data_dir, data_cfg: DataConfig, patch_size,
             report_path=None, identity: bool = False, num_classes: int | None = None) -> str:
    """Predict every case of ``data_dir`` and write the DSC/MSD report.

    With ``identity=True`` the ground truth is scored against itself and no
    model is needed.
    """
    num_classes = model.cfg.num_classes if model is not None else num_classes
    metrics = []
    ids = D.list_cases(data_dir)
    if not ids:
        raise TrainingError(f"no cases found under {data_dir}")
    max_label = 0
    for cid in ids:
        img_p, lbl_p = D.case_paths(data_dir, cid)
        gt = D.read_volume(lbl_p, is_label=True)
        max_label = max(max_label, int(gt.data.max()))
        if num_classes is not None and max_label >= num_classes:
            raise TrainingError(f"case {cid} has label {max_label} but the model predicts "
                                f"{num_classes} classes")
        if identity:
            pred = gt.data
        else:
            pred = predict_volume(model, D.read_volume(img_p), data_cfg, patch_size).data
        metrics.append((cid, pred, gt))
    if num_classes is None:
        num_classes = max_label + 1
    class_ids = list(range(1, num_classes))
    results = [evaluate_case(pred, gt.data, gt.spacing, class_ids=class_ids, case_id=cid)
               for cid, pred, gt in metrics]
    text = render_report(results, class_ids)
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(text)
    return text

