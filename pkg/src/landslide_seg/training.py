"""Training loop: online/momentum encoders, category queues, LR schedule, folds."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint_dir, save_checkpoint_dir
from .config import Hyperparameters, RunConfig, dump_config, to_dict
from .contrastive import (
    BACKGROUND,
    LANDSLIDE,
    AnchorSet,
    CandidateSet,
    MomentumPair,
    choose_anchor_positions,
    contrastive_term,
    enumerate_candidates,
    gather_pixels,
    initialize_queues,
    reencode_anchors,
)
from .data.preprocess import augment, prepare_sample
from .data.scene import SceneSample
from .data.split import DatasetSplit
from .metrics import (
    ConfusionCounts,
    MetricReport,
    accumulate_confusion,
    compute_metrics,
    cross_entropy,
    summarize_reports,
    total_loss,
)
from .network import SegmentationNetwork
from .validation import DataError

log = logging.getLogger(__name__)

HRSI_MEAN = 0.5
HRSI_STD = 0.25
DEM_SCALE_M = 50.0


def poly_lr(step: int, total_steps: int, hp: Hyperparameters) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return hp.initial_lr * (1.0 - step / total_steps) ** hp.poly_power


def hrsi_to_tensor(hrsi: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(hrsi)).to(dtype).permute(2, 0, 1) / 255.0
    return (x - HRSI_MEAN) / HRSI_STD


def dem_to_tensor(dem: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Elevation relative to the scene mean, in units of ``DEM_SCALE_M`` meters."""
    d = np.asarray(dem, dtype=np.float64)
    return torch.from_numpy((d - d.mean()) / DEM_SCALE_M).to(dtype).unsqueeze(0)


@dataclass
class Batch:
    hrsi: torch.Tensor
    dem: torch.Tensor
    label: torch.Tensor
    candidates: CandidateSet
    ids: List[str]


def make_batch(samples: Sequence[SceneSample], cfg: RunConfig, dtype=torch.float32,
               cache: Optional[Dict[str, CandidateSet]] = None) -> Batch:
    cands = CandidateSet()
    for b, s in enumerate(samples):
        if s.needs_interpolation:
            raise DataError(f"sample {s.id} still holds a coarse DEM; run prepare_sample first")
        if cache is not None and s.id in cache:
            found = cache[s.id]
        else:
            found = enumerate_candidates(s.label, s.dem, cfg.contrastive)
            if cache is not None:
                cache[s.id] = found
        cands.extend(replace(c, batch_index=b) for c in found)
    return Batch(
        hrsi=torch.stack([hrsi_to_tensor(s.hrsi, dtype) for s in samples]),
        dem=torch.stack([dem_to_tensor(s.dem, dtype) for s in samples]),
        label=torch.stack([torch.from_numpy(s.label.astype(np.int64)) for s in samples]),
        candidates=cands,
        ids=[s.id for s in samples],
    )


@dataclass
class StepResult:
    step: int
    loss: float
    ce: float
    sc: Optional[float]
    lr: float
    n_anchors: Dict[int, int] = field(default_factory=dict)


def _param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for p in model.parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


class Trainer:
    """Owns the online network, momentum twins, queues, optimizer and RNG streams.

    One seed fans out into independent streams for initialisation, data
    shuffling, anchor sampling and key sampling.
    """

    def __init__(self, cfg: RunConfig, total_steps: Optional[int] = None):
        cfg.validate()
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.precision == 64 else torch.float32
        init_ss, shuffle_ss, anchor_ss, key_ss, queue_ss = np.random.SeedSequence(cfg.train.seed).spawn(5)
        torch.manual_seed(int(init_ss.generate_state(1)[0]))
        self.model = SegmentationNetwork(cfg.network).to(self.dtype)
        self.pair = MomentumPair(self.model.encoder, self.model.projection, cfg.contrastive.momentum)
        self.queues = initialize_queues(cfg.contrastive, seed=int(queue_ss.generate_state(1)[0]),
                                        dtype=self.dtype)
        hp = cfg.train
        self.optimizer = torch.optim.SGD(_param_groups(self.model, hp.weight_decay), lr=hp.initial_lr,
                                         momentum=hp.sgd_momentum)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.anchor_rng = np.random.default_rng(anchor_ss)
        self.key_rng = np.random.default_rng(key_ss)
        self.total_steps = total_steps
        self.step_count = 0
        self.epoch = 0
        self.best_miou = -1.0
        self.history: List[Dict[str, object]] = []
        self.candidate_cache: Dict[str, CandidateSet] = {}

    # -- single step ---------------------------------------------------
    def queues_warm(self) -> bool:
        return all(q.warm for q in self.queues.values())

    def train_step(self, batch: Batch) -> StepResult:
        """One optimisation step in the documented order.

        online forward -> anchor sampling/projection -> momentum re-encode
        -> enqueue -> key sampling -> decoder -> loss -> momentum update ->
        backward + SGD on online encoder, projection head and decoder.
        """
        cfg = self.cfg
        if self.total_steps is None:
            raise RuntimeError("set total_steps before training")
        lr = poly_lr(min(self.step_count, self.total_steps), self.total_steps, cfg.train)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        self.pair.train()

        hrsi, dem, label = batch.hrsi.to(self.dtype), batch.dem.to(self.dtype), batch.label
        enc = self.model.encoder(hrsi, dem)
        emb = self.model.projection(enc.fused)
        positions, classes, short = choose_anchor_positions(batch.candidates, cfg.contrastive.K,
                                                            self.anchor_rng)
        anchors = AnchorSet(gather_pixels(emb, positions), torch.as_tensor(classes), positions, short)

        new_keys = reencode_anchors(hrsi, dem, positions, self.pair)
        cls_t = torch.as_tensor(classes)
        for cls, queue in self.queues.items():
            queue.enqueue(new_keys[cls_t == cls], tag=self.step_count)

        use_sc = (cfg.loss.beta > 0 and self.queues_warm() and not anchors.empty_classes())
        sc = contrastive_term(anchors, self.queues, cfg.contrastive, self.key_rng) if use_sc else None

        score = self.model.decoder(enc.fused, enc.block1)
        _, ce = cross_entropy(score, label)
        loss = total_loss([ce], [sc] if sc is not None else [], cfg.loss)

        self.pair.update()
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return StepResult(
            step=self.step_count, loss=float(loss.detach()), ce=float(ce.detach()),
            sc=None if sc is None else float(sc.detach()), lr=lr,
            n_anchors={LANDSLIDE: int((cls_t == LANDSLIDE).sum()),
                       BACKGROUND: int((cls_t == BACKGROUND).sum())},
        )

    # -- inference -----------------------------------------------------
    @torch.no_grad()
    def predict_proba(self, samples: Sequence[SceneSample], batch_size: int = 4) -> np.ndarray:
        self.model.eval()
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            hrsi = torch.stack([hrsi_to_tensor(s.hrsi, self.dtype) for s in chunk])
            dem = torch.stack([dem_to_tensor(s.dem, self.dtype) for s in chunk])
            out.append(torch.softmax(self.model(hrsi, dem), dim=1)[:, 1].cpu().numpy())
        return np.concatenate(out)

    def evaluate(self, samples: Sequence[SceneSample]) -> MetricReport:
        if not samples:
            raise DataError("cannot evaluate an empty partition")
        probs = self.predict_proba(samples)
        counts = ConfusionCounts()
        for p, s in zip(probs, samples):
            counts = accumulate_confusion(p > 0.5, s.label, counts)
        return compute_metrics(counts)

    # -- epochs --------------------------------------------------------
    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.cfg.train.batch_size)

    def fit(self, train: Sequence[SceneSample], val: Sequence[SceneSample] = (),
            epochs: Optional[int] = None, run_dir: Optional[Path] = None,
            stop_after_epoch: Optional[int] = None) -> "Trainer":
        """Train until ``epochs``; continues from ``self.epoch`` after a resume.

        With ``run_dir`` set, per-epoch records go to ``epochs.jsonl`` and
        checkpoints to ``checkpoints/last`` and ``checkpoints/best`` (best
        validation mIoU).
        """
        if not train:
            raise DataError("training partition is empty")
        epochs = epochs or self.cfg.train.epochs
        if self.total_steps is None:
            self.total_steps = epochs * self.steps_per_epoch(len(train))
        bs = self.cfg.train.batch_size
        run_dir = Path(run_dir) if run_dir is not None else None
        while self.epoch < epochs:
            order = self.shuffle_rng.permutation(len(train))
            started = time.time()
            results = []
            for i in range(0, len(order), bs):
                chunk = [train[j] for j in order[i:i + bs]]
                results.append(self.train_step(make_batch(chunk, self.cfg, self.dtype,
                                                          self.candidate_cache)))
            self.epoch += 1
            record: Dict[str, object] = {
                "epoch": self.epoch,
                "step": self.step_count,
                "loss": float(np.mean([r.loss for r in results])),
                "ce": float(np.mean([r.ce for r in results])),
                "sc": (float(np.mean([r.sc for r in results if r.sc is not None]))
                       if any(r.sc is not None for r in results) else None),
                "lr": results[-1].lr,
                "seconds": round(time.time() - started, 3),
            }
            improved = False
            if val:
                report = self.evaluate(val)
                record["val"] = report.as_dict()
                if report.miou > self.best_miou:
                    self.best_miou = report.miou
                    improved = True
            self.history.append(record)
            log.info("epoch %d %s", self.epoch, record)
            if run_dir is not None:
                with open(run_dir / "epochs.jsonl", "a") as fh:
                    fh.write(json.dumps(record) + "\n")
                if improved:
                    self.save(run_dir / "checkpoints" / "best")
                self.save(run_dir / "checkpoints" / "last")
            if stop_after_epoch is not None and self.epoch >= stop_after_epoch:
                break
        return self

    # -- persistence ---------------------------------------------------
    def state(self) -> Dict[str, object]:
        tensors: Dict[str, torch.Tensor] = {}
        for k, v in self.model.state_dict().items():
            tensors[f"model.{k}"] = v
        for k, v in self.pair.encoder_k.state_dict().items():
            tensors[f"momentum_encoder.{k}"] = v
        for k, v in self.pair.projection_k.state_dict().items():
            tensors[f"momentum_projection.{k}"] = v
        for cls, q in self.queues.items():
            tensors[f"queue.{cls}.buffer"] = q.buffer
            tensors[f"queue.{cls}.age"] = q.age
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            buf = st.get("momentum_buffer")
            if buf is not None:
                tensors[f"optimizer.{idx}.momentum_buffer"] = buf
        tensors["torch_rng"] = torch.get_rng_state()
        meta = {
            "config": to_dict(self.cfg),
            "step": self.step_count,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "best_miou": self.best_miou,
            "history": self.history,
            "queues": {str(c): {"head": q.head, "real_count": q.real_count, "updates": q.updates}
                       for c, q in self.queues.items()},
            "rng": {"shuffle": self.shuffle_rng.bit_generator.state,
                    "anchor": self.anchor_rng.bit_generator.state,
                    "key": self.key_rng.bit_generator.state},
            "optimizer_groups": [{k: v for k, v in g.items() if k != "params"}
                                 for g in opt["param_groups"]],
        }
        return {"meta": meta, "tensors": tensors}

    def save(self, path) -> Path:
        st = self.state()
        return save_checkpoint_dir(path, st["tensors"], st["meta"])

    def load(self, path) -> "Trainer":
        tensors, meta = load_checkpoint_dir(path)
        with torch.no_grad():
            self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
            self.pair.encoder_k.load_state_dict(
                {k[len("momentum_encoder."):]: v for k, v in tensors.items()
                 if k.startswith("momentum_encoder.")})
            self.pair.projection_k.load_state_dict(
                {k[len("momentum_projection."):]: v for k, v in tensors.items()
                 if k.startswith("momentum_projection.")})
        for cls, q in self.queues.items():
            q.load_state_dict({"buffer": tensors[f"queue.{cls}.buffer"], "age": tensors[f"queue.{cls}.age"],
                               **meta["queues"][str(cls)]})
        opt = self.optimizer.state_dict()
        opt["state"] = {}
        for k, v in tensors.items():
            if k.startswith("optimizer."):
                idx = int(k.split(".")[1])
                opt["state"][idx] = {"momentum_buffer": v.clone()}
        for g, saved in zip(opt["param_groups"], meta["optimizer_groups"]):
            g.update(saved)
        self.optimizer.load_state_dict(opt)
        torch.set_rng_state(tensors["torch_rng"])
        self.shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
        self.anchor_rng.bit_generator.state = meta["rng"]["anchor"]
        self.key_rng.bit_generator.state = meta["rng"]["key"]
        self.step_count = int(meta["step"])
        self.epoch = int(meta["epoch"])
        self.total_steps = meta["total_steps"]
        self.best_miou = float(meta["best_miou"])
        self.history = list(meta["history"])
        return self


def expand_partition(samples: Sequence[SceneSample], augment_it: bool) -> List[SceneSample]:
    if not augment_it:
        return list(samples)
    return [a for s in samples for a in augment(s)]


@dataclass
class FoldResult:
    fold: int
    report: MetricReport
    best_val_miou: float
    run_dir: Optional[Path]


def run_fold(fold_id: int, split: DatasetSplit, samples: Sequence[SceneSample], cfg: RunConfig,
             run_dir=None, resume: bool = False, stop_after_epoch: Optional[int] = None) -> FoldResult:
    """Train on one fold, select the best-validation checkpoint, score the test set.

    Train and validation partitions are augmented when ``cfg.train.augment``
    is set; the test partition never is.
    """
    by_id = {s.id: s for s in samples}
    parts = {}
    for name in ("train", "val", "test"):
        ids = split.partition(fold_id, name)
        if not ids:
            raise DataError(f"fold {fold_id} has an empty {name} partition")
        parts[name] = [by_id[i] for i in ids]
    prepared = {k: [prepare_sample(s, equalize=cfg.train.equalize, method=cfg.dem_interpolation)
                    for s in v] for k, v in parts.items()}
    train = expand_partition(prepared["train"], cfg.train.augment)
    val = expand_partition(prepared["val"], cfg.train.augment)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.yaml")
    trainer = Trainer(cfg)
    last = run_dir / "checkpoints" / "last" if run_dir is not None else None
    if resume and last is not None and (last / "manifest.json").exists():
        trainer.load(last)
    trainer.fit(train, val, cfg.train.epochs, run_dir, stop_after_epoch=stop_after_epoch)
    if trainer.epoch < cfg.train.epochs:
        return FoldResult(fold_id, trainer.evaluate(prepared["test"]), trainer.best_miou, run_dir)
    best = run_dir / "checkpoints" / "best" if run_dir is not None else None
    if best is not None and (best / "manifest.json").exists():
        trainer.load(best)
    report = trainer.evaluate(prepared["test"])
    if run_dir is not None:
        report.write(run_dir / "test_report")
    return FoldResult(fold_id, report, trainer.best_miou, run_dir)


def run_cross_validation(split: DatasetSplit, samples: Sequence[SceneSample], cfg: RunConfig,
                         run_dir=None) -> Dict[str, object]:
    results = []
    for f in range(split.fold_count):
        sub = Path(run_dir) / f"fold{f}" if run_dir is not None else None
        results.append(run_fold(f, split, samples, cfg, sub))
    summary = summarize_reports([r.report for r in results])
    if run_dir is not None:
        Path(run_dir, "summary.json").write_text(json.dumps(
            {"folds": [r.report.to_record() for r in results], "summary": summary}, indent=2))
    return {"folds": results, "summary": summary}


def overfit_probe(cfg: RunConfig, n_samples: int = 8, epochs: int = 200,
                  samples: Optional[Sequence[SceneSample]] = None) -> Dict[str, object]:
    """Train on a handful of synthetic scenes and score on the same scenes."""
    from .data.synthetic import generate_synthetic_dataset

    if samples is None:
        samples = generate_synthetic_dataset(n_samples, cfg.synthetic, cfg.contrastive)
    prepared = [prepare_sample(s, equalize=cfg.train.equalize) for s in samples]
    trainer = Trainer(cfg)
    started = time.time()
    trainer.fit(prepared, (), epochs)
    report = trainer.evaluate(prepared)
    sc_values = [h["sc"] for h in trainer.history if h["sc"] is not None]
    return {
        "report": report,
        "landslide_iou": report.landslide_iou,
        "seconds": time.time() - started,
        "sc_logged": bool(sc_values) and any(v > 0 for v in sc_values),
        "history": trainer.history,
        "trainer": trainer,
    }
