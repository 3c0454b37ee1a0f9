"""Pipeline wiring, training loop, evaluation and inference."""
from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import torch

from . import dataio
from .checkpoint import load_checkpoint, save_checkpoint
from .clip_provider import ClipBackend, PromptBank, build_clip, similarity
from .config import ExperimentConfig
from .losses import (LOG_HEADER, LossReport, classification_loss, coarse_loss, iou_loss,
                     jaccard_score, precision_score, total_loss)
from .model import CoSegNet, ForwardOutput
from .records import DataError, ImageSet, MaskBatch, NumericalError, TrainConfig
from .regularization import gt_class_target, masked_attention_norm

log = logging.getLogger(__name__)


class CoSegmenter:
    """A network bound to a frozen CLIP backend and a prompt bank."""

    def __init__(self, net: CoSegNet, clip: ClipBackend, bank: PromptBank):
        if len(bank) != net.cfg.num_prompts:
            raise ValueError(f"bank has {len(bank)} prompts, network expects {net.cfg.num_prompts}")
        self.net = net
        self.clip = clip
        self.bank = bank
        self._h_txt: Optional[torch.Tensor] = None

    @property
    def h_txt(self) -> torch.Tensor:
        if self._h_txt is None:
            self._h_txt = self.clip.encode_prompts(self.bank)
        return self._h_txt

    def bundle(self, images: torch.Tensor):
        return similarity(self.clip.encode_images(images), self.h_txt)

    def run(self, s: ImageSet) -> ForwardOutput:
        cfg = self.net.cfg
        if tuple(s.size) != tuple(cfg.input_size):
            raise DataError(f"set {s.set_id!r} is {s.size}, model expects {cfg.input_size}")
        bundle = None
        if cfg.clip_interaction or cfg.clip_regularization:
            b = self.bundle(s.images)
            dtype = next(self.net.parameters()).dtype
            bundle = similarity(b.h_img.to(dtype), b.h_txt.to(dtype))
        return self.net(s.images.to(next(self.net.parameters()).dtype), bundle=bundle)

    def forward_set(self, s: ImageSet) -> MaskBatch:
        out = self.run(s)
        return MaskBatch(pred=out.pred, gt=s.gt_masks, coarse_pred=out.coarse)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


def build_segmenter(cfg: ExperimentConfig) -> CoSegmenter:
    clip = build_clip(cfg.clip.backend, cfg.resolve(cfg.clip.fixtures), cfg.clip.fixture_mode,
                      cfg.clip.name, cfg.clip.dim)
    seed_everything(cfg.train.seed)
    net = CoSegNet(cfg.model_config(clip.dim))
    bank = PromptBank(tuple(cfg.train.prompt_vocabulary), cfg.train.prompt_template)
    return CoSegmenter(net, clip, bank)


def segmenter_from_checkpoint(checkpoint: Path, cfg: Optional[ExperimentConfig] = None) -> CoSegmenter:
    net, snapshot, _ = load_checkpoint(checkpoint)
    cfg = cfg or snapshot
    if cfg is None:
        raise DataError(f"{checkpoint} has no config snapshot; pass a config")
    clip = build_clip(cfg.clip.backend, cfg.resolve(cfg.clip.fixtures), cfg.clip.fixture_mode,
                      cfg.clip.name, cfg.clip.dim)
    net.set_toggles(cfg.train.isfc, cfg.train.clip_interaction, cfg.train.clip_regularization)
    bank = PromptBank(tuple(cfg.train.prompt_vocabulary), cfg.train.prompt_template)
    return CoSegmenter(net.eval(), clip, bank)


# ---------------------------------------------------------------- training


class SetSampler:
    """Uniform over classes, then ``n`` images without replacement within the class."""

    def __init__(self, set_dirs: Sequence[Path], n: int, size: tuple[int, int], seed: int = 0):
        self.classes = []
        for d in set_dirs:
            paths = dataio.list_images(Path(d) / "images")
            if not paths:
                raise DataError(f"no images in {d}")
            if not (Path(d) / "masks").is_dir():
                raise DataError(f"training set {d} has no masks/ directory")
            self.classes.append((Path(d), paths))
        self.n = n
        self.size = tuple(size)
        self.rng = random.Random(seed)

    def sample(self) -> ImageSet:
        d, paths = self.classes[self.rng.randrange(len(self.classes))]
        chosen = self.rng.sample(paths, min(self.n, len(paths)))
        return load_paths(d, chosen, self.size)


def load_paths(set_dir: Path, paths: Sequence[Path], size: tuple[int, int]) -> ImageSet:
    images = [dataio.read_rgb(p, size) for p in paths]
    masks = None
    if (set_dir / "masks").is_dir():
        masks = []
        for p in paths:
            mp = set_dir / "masks" / p.name
            if not mp.exists():
                mp = set_dir / "masks" / (p.stem + ".png")
            if not mp.exists():
                raise DataError(f"missing mask for {p.name} in {set_dir / 'masks'}")
            masks.append(dataio.read_mask(mp, size))
    return ImageSet.from_list(images, masks, set_id=str(set_dir), class_hint=set_dir.name)


def compute_losses(seg: CoSegmenter, s: ImageSet, tc: TrainConfig):
    """Forward one set and return ``(total_tensor, LossReport, ForwardOutput)``."""
    if s.gt_masks is None:
        raise DataError(f"set {s.set_id!r} has no ground-truth masks")
    out = seg.run(s)
    gt = s.gt_masks.to(out.pred.dtype)
    l_iou = iou_loss(out.pred, gt)
    l_cs = coarse_loss(out.coarse, gt) if out.coarse is not None and tc.loss_cs else None
    l_c = None
    if out.upsilon is not None and tc.loss_c:
        target = gt_class_target(s, seg.bank, seg.clip, seg.h_txt).to(out.upsilon.dtype)
        l_c = classification_loss(out.upsilon, target)
    total, report = total_loss(l_iou, l_cs, l_c, tc)
    return total, report, out


def train_segmenter(seg: CoSegmenter, sample: Callable[[], ImageSet], tc: TrainConfig,
                    steps: Optional[int] = None, log_file=None,
                    on_step: Optional[Callable[[int, LossReport], None]] = None) -> list[LossReport]:
    """Optimize every trainable network parameter; CLIP is never touched."""
    steps = tc.steps if steps is None else steps
    params = [p for p in seg.net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    seg.net.train()
    history = []
    for step in range(1, steps + 1):
        s = sample()
        total, report, _ = compute_losses(seg, s, tc)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss at step {step} on set {s.set_id!r}: {report.as_dict()}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append(report)
        if log_file is not None:
            log_file.write(report.log_line(step) + "\n")
            log_file.flush()
        if on_step is not None:
            on_step(step, report)
    seg.net.eval()
    return history


def train(cfg: ExperimentConfig, steps: Optional[int] = None) -> Path:
    """Train from ``cfg.train_manifest``; writes checkpoints and ``loss_log.tsv``; returns the final checkpoint."""
    if cfg.train_manifest is None:
        raise DataError("config has no train_manifest")
    torch.use_deterministic_algorithms(True, warn_only=True)
    out_dir = cfg.resolve(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")
    seg = build_segmenter(cfg)
    clip_sum = seg.clip.checksum()
    sampler = SetSampler(dataio.read_manifest(cfg.resolve(cfg.train_manifest)), cfg.train.set_size_train,
                         cfg.input_size, seed=cfg.train.seed)

    def checkpoint(step, report):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(seg.net, out_dir / f"checkpoint_{step:06d}.pt", cfg, step)
        log.info("step %d total %.5f", step, report.l_total)

    n_steps = cfg.train.steps if steps is None else steps
    with open(out_dir / "loss_log.tsv", "w") as fh:
        fh.write(LOG_HEADER + "\n")
        train_segmenter(seg, sampler.sample, cfg.train, n_steps, fh, checkpoint)
    if seg.clip.checksum() != clip_sum:
        raise RuntimeError("CLIP state changed during training")
    return save_checkpoint(seg.net, out_dir / "checkpoint_final.pt", cfg, n_steps)


# -------------------------------------------------------------- evaluation


@dataclass
class SetResult:
    dataset: str
    set_id: str
    images: int
    precision: float
    jaccard: float
    norm_before: Optional[float] = None
    norm_after: Optional[float] = None


@dataclass
class EvalReport:
    datasets: dict[str, dict] = field(default_factory=dict)
    sets: list[SetResult] = field(default_factory=list)
    config: Optional[dict] = None
    n_eval: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def chunk_with_wrap(items: Sequence, n: int) -> list[tuple[list, int]]:
    """Groups of ``n``; the final partial group is padded by wrapping to the start.

    Returns ``(group, real_count)`` pairs, where the first ``real_count``
    members are not padding.
    """
    if n < 1:
        raise ValueError("group size must be positive")
    items = list(items)
    groups = []
    for start in range(0, len(items), n):
        group = items[start:start + n]
        real = len(group)
        i = 0
        while len(group) < n and len(items) > 0:
            group.append(items[i % len(items)])
            i += 1
        groups.append((group, real))
    return groups


Predictor = Callable[[ImageSet], tuple[torch.Tensor, Optional[ForwardOutput]]]


def evaluate_groups(groups: Iterable[tuple[str, ImageSet, int]], predict: Predictor) -> EvalReport:
    """Score ``(dataset, set, real_count)`` triples; only the first ``real_count`` images count."""
    t0 = time.perf_counter()
    report = EvalReport()
    pooled: dict[str, list[tuple[float, float]]] = {}
    for name, s, real in groups:
        if s.gt_masks is None:
            raise DataError(f"evaluation set {s.set_id!r} has no ground-truth masks")
        pred, out = predict(s)
        scores = [(precision_score(pred[i], s.gt_masks[i]), jaccard_score(pred[i], s.gt_masks[i]))
                  for i in range(real)]
        pooled.setdefault(name, []).extend(scores)
        res = SetResult(name, s.set_id, real,
                        sum(p for p, _ in scores) / real, sum(j for _, j in scores) / real)
        if out is not None and out.f3_before is not None:
            m = s.gt_masks[:real]
            res.norm_before = masked_attention_norm(out.f3_before[:real].detach(), m)
            res.norm_after = masked_attention_norm(out.f3_after[:real].detach(), m)
        report.sets.append(res)
    for name, scores in pooled.items():
        report.datasets[name] = {
            "P": sum(p for p, _ in scores) / len(scores),
            "J": sum(j for _, j in scores) / len(scores),
            "images": len(scores),
        }
    report.wall_clock_s = time.perf_counter() - t0
    return report


def iter_eval_groups(manifests: dict[str, Path], n_eval: int, size: tuple[int, int]):
    for name, manifest in manifests.items():
        for set_dir in dataio.read_manifest(manifest):
            paths = dataio.list_images(set_dir / "images")
            for group, real in chunk_with_wrap(paths, n_eval):
                yield name, load_paths(set_dir, group, size), real


def model_predictor(seg: CoSegmenter) -> Predictor:
    def predict(s: ImageSet):
        with torch.no_grad():
            out = seg.run(s)
        return (out.pred > 0.5).float(), out
    return predict


def evaluate(cfg: ExperimentConfig, checkpoint: Path, n_eval: Optional[int] = None,
             out_path: Optional[Path] = None) -> EvalReport:
    n_eval = n_eval or cfg.n_eval
    if not cfg.eval_manifests:
        raise DataError("config has no eval_manifests")
    seg = segmenter_from_checkpoint(checkpoint, cfg)
    manifests = {k: cfg.resolve(v) for k, v in cfg.eval_manifests.items()}
    t0 = time.perf_counter()
    report = evaluate_groups(iter_eval_groups(manifests, n_eval, cfg.input_size), model_predictor(seg))
    report.wall_clock_s = time.perf_counter() - t0
    report.n_eval = n_eval
    report.config = cfg.to_dict()
    out_path = out_path or cfg.resolve(cfg.output_dir) / f"eval_report_n{n_eval}.json"
    report.save(out_path)
    return report


# --------------------------------------------------------------- inference


def infer(images_dir: Path, checkpoint: Path, out_dir: Path, overlay: bool = False,
          cfg: Optional[ExperimentConfig] = None) -> list[Path]:
    """Write one 0/255 mask PNG per input image (same filename), at the input's original size."""
    seg = segmenter_from_checkpoint(checkpoint, cfg)
    size = seg.net.cfg.input_size
    s, paths, sizes = dataio.load_image_dir(Path(images_dir), size)
    with torch.no_grad():
        pred = seg.run(s).pred
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (p, orig) in enumerate(zip(paths, sizes)):
        mp = out_dir / (p.stem + ".png")
        dataio.write_mask_png(pred[i], mp, orig)
        written.append(mp)
        if overlay:
            dataio.write_overlay(p, mp, out_dir / (p.stem + "_overlay.png"))
    return written
