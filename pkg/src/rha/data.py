"""QA instance files, the synthetic dataset generator, and evaluation metrics.

An instance is one JSON document (optionally gzip-compressed)::

    {"id": ..., "fps": ..., "frame_size": [w, h],      # frame_size optional
     "frames": [{"objects": [{"feature", "label_embedding", "bbox", "label_id"}],
                 "subtitle": [[...], ...]}],
     "hypotheses": [[[...], ...] x 5],
     "gt": {"answer_idx", "span_start_sec", "span_end_sec",
            "boxes": [{"frame": t, "bbox": [x1, y1, x2, y2]}]}}

A manifest lists instance files (relative to the manifest) and the input widths::

    {"dims": {"d_o", "d_l", "d_s", "d_q"}, "instances": [paths]}
"""

from __future__ import annotations

import gzip
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BoundingBox, TimeSpan, iou, snap_span, temporal_iou

NUM_HYPOTHESES = 5
DEFAULT_FRAME_SIZE = (640.0, 360.0)
INPUT_DIMS = ("d_o", "d_l", "d_s", "d_q")


class SchemaError(ValueError):
    pass


class DimensionError(SchemaError):
    pass


@dataclass
class FrameObjects:
    features: np.ndarray          # [N, d_o]
    label_embeddings: np.ndarray  # [N, d_l]
    boxes: list[BoundingBox]
    label_ids: list[int]

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class GroundTruth:
    answer_idx: int
    span_start_sec: float
    span_end_sec: float
    boxes: list[tuple[int, BoundingBox]] = field(default_factory=list)


@dataclass
class QAInstance:
    id: str
    fps: float
    frames: list[FrameObjects]
    subtitles: np.ndarray         # [T, L_s, d_s]
    hypotheses: np.ndarray        # [5, L_q, d_q]
    gt: GroundTruth
    frame_size: tuple[float, float] = DEFAULT_FRAME_SIZE

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_diag(self) -> float:
        return math.hypot(*self.frame_size)

    @property
    def span(self) -> TimeSpan:
        return snap_span(self.gt.span_start_sec, self.gt.span_end_sec, self.fps, self.num_frames)

    def positives(self, t: int) -> np.ndarray:
        """Objects of frame ``t`` overlapping a ground-truth box with IoU > 0.5."""
        frame = self.frames[t]
        pos = np.zeros(len(frame), dtype=bool)
        for ft, gbox in self.gt.boxes:
            if ft == t:
                pos |= np.array([iou(b, gbox) > 0.5 for b in frame.boxes])
        return pos

    def dims(self) -> dict[str, int]:
        return {"d_o": self.frames[0].features.shape[1], "d_l": self.frames[0].label_embeddings.shape[1],
                "d_s": self.subtitles.shape[2], "d_q": self.hypotheses.shape[2]}


# ---------------------------------------------------------------- validation / (de)serialisation

def _err(iid, msg) -> SchemaError:
    return SchemaError(f"instance {iid!r}: {msg}")


def _matrix(value, iid, name, width=None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise _err(iid, f"{name} is not a numeric matrix") from None
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise _err(iid, f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise DimensionError(f"instance {iid!r}: {name} width {arr.shape[1]} != expected {width}")
    if not np.all(np.isfinite(arr)):
        raise _err(iid, f"{name} contains non-finite values")
    return arr


def instance_from_dict(doc: dict, dims: dict[str, int] | None = None) -> QAInstance:
    """Validate a parsed instance document; ``dims`` pins the expected input widths."""
    dims = dims or {}
    iid = doc.get("id", "<missing id>")
    for key in ("id", "fps", "frames", "hypotheses", "gt"):
        if key not in doc:
            raise _err(iid, f"missing field {key!r}")
    fps = float(doc["fps"])
    if not fps > 0:
        raise _err(iid, "fps must be positive")
    if not doc["frames"]:
        raise _err(iid, "frames must be non-empty")
    frame_size = tuple(float(v) for v in doc.get("frame_size", DEFAULT_FRAME_SIZE))
    if len(frame_size) != 2 or min(frame_size) <= 0:
        raise _err(iid, "frame_size must be [width, height] with positive entries")

    frames, subs = [], []
    for t, fr in enumerate(doc["frames"]):
        objs = fr.get("objects")
        if not objs:
            raise _err(iid, f"frames[{t}].objects must be non-empty")
        for k in ("feature", "label_embedding", "bbox", "label_id"):
            if any(k not in o for o in objs):
                raise _err(iid, f"frames[{t}].objects[].{k} missing")
        feats = _matrix([o["feature"] for o in objs], iid, f"frames[{t}] feature (d_o)", dims.get("d_o"))
        labs = _matrix([o["label_embedding"] for o in objs], iid, f"frames[{t}] label_embedding (d_l)",
                       dims.get("d_l"))
        try:
            boxes = [BoundingBox.of(o["bbox"]) for o in objs]
        except (ValueError, TypeError) as exc:
            raise _err(iid, f"frames[{t}] bbox: {exc}") from None
        if "subtitle" not in fr:
            raise _err(iid, f"frames[{t}].subtitle missing")
        subs.append(_matrix(fr["subtitle"], iid, f"frames[{t}] subtitle (d_s)", dims.get("d_s")))
        frames.append(FrameObjects(feats, labs, boxes, [int(o["label_id"]) for o in objs]))
    for name, key in (("d_o", "features"), ("d_l", "label_embeddings")):
        widths = {getattr(f, key).shape[1] for f in frames}
        if len(widths) != 1:
            raise DimensionError(f"instance {iid!r}: {name} varies across frames: {sorted(widths)}")
    if len({s.shape for s in subs}) != 1:
        raise _err(iid, "every frame's subtitle must have the same [L_s, d_s] shape")

    hyps = doc["hypotheses"]
    if not isinstance(hyps, list) or len(hyps) != NUM_HYPOTHESES:
        n = len(hyps) if isinstance(hyps, list) else "non-list"
        raise _err(iid, f"hypotheses must hold exactly {NUM_HYPOTHESES} entries, got {n}")
    hyp = [_matrix(h, iid, f"hypotheses[{k}] (d_q)", dims.get("d_q")) for k, h in enumerate(hyps)]
    if len({h.shape for h in hyp}) != 1:
        raise _err(iid, "all hypotheses must share the same [L_q, d_q] shape")

    g = doc["gt"]
    for key in ("answer_idx", "span_start_sec", "span_end_sec"):
        if key not in g:
            raise _err(iid, f"missing field gt.{key}")
    ans = int(g["answer_idx"])
    if not 0 <= ans < NUM_HYPOTHESES:
        raise _err(iid, f"gt.answer_idx {ans} outside 0..4")
    gt_boxes = []
    for b in g.get("boxes", []):
        t = int(b["frame"])
        if not 0 <= t < len(frames):
            raise _err(iid, f"gt box frame {t} outside {len(frames)} frames")
        gt_boxes.append((t, BoundingBox.of(b["bbox"])))
    gt = GroundTruth(ans, float(g["span_start_sec"]), float(g["span_end_sec"]), gt_boxes)
    inst = QAInstance(str(doc["id"]), fps, frames, np.stack(subs), np.stack(hyp), gt, frame_size)
    try:
        inst.span
    except ValueError as exc:
        raise _err(iid, f"gt span: {exc}") from None
    return inst


def instance_to_dict(inst: QAInstance) -> dict:
    return {
        "id": inst.id,
        "fps": inst.fps,
        "frame_size": list(inst.frame_size),
        "frames": [
            {"objects": [{"feature": fr.features[i].tolist(),
                          "label_embedding": fr.label_embeddings[i].tolist(),
                          "bbox": list(fr.boxes[i].as_tuple()),
                          "label_id": int(fr.label_ids[i])} for i in range(len(fr))],
             "subtitle": inst.subtitles[t].tolist()}
            for t, fr in enumerate(inst.frames)],
        "hypotheses": inst.hypotheses.tolist(),
        "gt": {"answer_idx": inst.gt.answer_idx,
               "span_start_sec": inst.gt.span_start_sec,
               "span_end_sec": inst.gt.span_end_sec,
               "boxes": [{"frame": t, "bbox": list(b.as_tuple())} for t, b in inst.gt.boxes]},
    }


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save_instance(inst: QAInstance, path: str | os.PathLike) -> None:
    path = Path(path)
    if str(path).endswith(".gz"):
        # mtime=0 keeps compressed output byte-reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(json.dumps(instance_to_dict(inst)).encode("utf-8"))
        return
    with _open(path, "w") as fh:
        json.dump(instance_to_dict(inst), fh)


def load_instance(path: str | os.PathLike, dims: dict[str, int] | None = None) -> QAInstance:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open(path, "r") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return instance_from_dict(doc, dims)


@dataclass
class Dataset:
    dims: dict[str, int]
    instances: list[QAInstance]
    meta: dict = field(default_factory=dict)


def save_dataset(ds: Dataset, directory: str | os.PathLike, compress: bool = False) -> Path:
    """Write every instance plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".json.gz" if compress else ".json"
    names = []
    for inst in ds.instances:
        name = f"{inst.id}{suffix}"
        save_instance(inst, directory / name)
        names.append(name)
    manifest = {"dims": ds.dims, "instances": names}
    if ds.meta:
        manifest["meta"] = ds.meta
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    doc = json.loads(path.read_text())
    if "dims" not in doc or "instances" not in doc:
        raise SchemaError(f"{path}: manifest needs 'dims' and 'instances'")
    dims = {k: int(doc["dims"][k]) for k in INPUT_DIMS if k in doc["dims"]}
    if set(dims) != set(INPUT_DIMS):
        raise SchemaError(f"{path}: manifest dims must list {INPUT_DIMS}")
    if not doc["instances"]:
        raise SchemaError(f"{path}: manifest lists no instances")
    insts = [load_instance(path.parent / p, dims) for p in doc["instances"]]
    return Dataset(dims, insts, doc.get("meta", {}))


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticConfig:
    num_instances: int = 32
    T: int = 8
    N_o: int = 4
    L_q: int = 6
    L_s: int = 4
    d_o: int = 24
    d_l: int = 24
    d_s: int = 32
    d_q: int = 32
    seed: int = 0
    signal: float = 4.0
    fps: float = 1.0
    num_labels: int = 8
    frame_size: tuple[float, float] = DEFAULT_FRAME_SIZE

    def validate(self) -> None:
        if self.T < 2 or self.N_o < 2:
            raise ValueError(f"degenerate synthetic config: need T >= 2 and N_o >= 2 (T={self.T}, N_o={self.N_o})")
        if self.num_instances < 1 or self.L_q < 1 or self.L_s < 1:
            raise ValueError("num_instances, L_q and L_s must be positive")
        if self.signal < 0:
            raise ValueError("signal strength must be non-negative")


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _random_box(rng: np.random.Generator, w: float, h: float) -> BoundingBox:
    bw, bh = rng.uniform(0.1, 0.5) * w, rng.uniform(0.1, 0.5) * h
    x1, y1 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
    return BoundingBox(x1, y1, x1 + bw, y1 + bh)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a dataset with a planted, learnable answer/span signal.

    Shared across the dataset: a unit "match" direction in object space and its
    counterpart in hypothesis space, plus two boundary-cue directions. Per
    instance a span and an answer index are drawn. Inside the span one object
    per frame is positive (it is the ground-truth box) and its feature gets
    ``signal * match``; the first and last span frames additionally get the
    start/end cues. Every token of the correct hypothesis gets ``signal *
    match_q``. Distractor hypotheses and everything else are unit Gaussian noise.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    shared_ss, *inst_ss = root.spawn(cfg.num_instances + 1)
    shared = np.random.Generator(np.random.PCG64(shared_ss))
    match_o = _unit(shared, cfg.d_o)
    match_q = _unit(shared, cfg.d_q)
    cue_start = _unit(shared, cfg.d_o)
    cue_end = _unit(shared, cfg.d_o)
    label_table = shared.standard_normal((cfg.num_labels, cfg.d_l))
    w, h = cfg.frame_size
    s = cfg.signal

    insts = []
    for idx, ss in enumerate(inst_ss):
        rng = np.random.Generator(np.random.PCG64(ss))
        T, N = cfg.T, cfg.N_o
        length = int(rng.integers(1, T + 1))
        start = int(rng.integers(0, T - length + 1))
        end = start + length
        answer = int(rng.integers(0, NUM_HYPOTHESES))
        frames, gt_boxes = [], []
        for t in range(T):
            feats = rng.standard_normal((N, cfg.d_o))
            labels = rng.integers(0, cfg.num_labels, size=N)
            boxes = [_random_box(rng, w, h) for _ in range(N)]
            if start <= t < end:
                pos = int(rng.integers(0, N))
                feats[pos] += s * match_o
                if t == start:
                    feats[pos] += s * cue_start
                if t == end - 1:
                    feats[pos] += s * cue_end
                gt_boxes.append((t, boxes[pos]))
            frames.append(FrameObjects(feats, label_table[labels].copy(), boxes, labels.tolist()))
        subtitles = rng.standard_normal((T, cfg.L_s, cfg.d_s))
        hyps = rng.standard_normal((NUM_HYPOTHESES, cfg.L_q, cfg.d_q))
        hyps[answer] += s * match_q
        gt = GroundTruth(answer, start / cfg.fps, end / cfg.fps, gt_boxes)
        insts.append(QAInstance(f"syn{cfg.seed}_{idx:05d}", cfg.fps, frames, subtitles, hyps, gt,
                                tuple(cfg.frame_size)))

    dims = {"d_o": cfg.d_o, "d_l": cfg.d_l, "d_s": cfg.d_s, "d_q": cfg.d_q}
    meta = {"seed": cfg.seed, "signal": cfg.signal, "probe_accuracy": probe_accuracy(insts)}
    return Dataset(dims, insts, meta)


def _probe_pairs(inst: QAInstance) -> tuple[np.ndarray, np.ndarray]:
    span = inst.span
    obj = np.concatenate([inst.frames[t].features for t in range(span.start, span.end)]).mean(axis=0)
    return inst.hypotheses.mean(axis=1), obj


def probe_accuracy(insts: Sequence[QAInstance]) -> float:
    """Leave-one-out bilinear probe: how often the correct hypothesis scores highest.

    The probe matrix is the cross-covariance of correct-hypothesis means and
    mean ground-truth-span object features over the other instances; a
    hypothesis k scores ``h_k^T C o``.
    """
    pairs = [_probe_pairs(i) for i in insts]
    outer = [np.outer(h[i.gt.answer_idx], o) for (h, o), i in zip(pairs, insts)]
    total = np.sum(outer, axis=0)
    hits = 0
    for (h, o), i, own in zip(pairs, insts, outer):
        C = total - own if len(insts) > 1 else total
        scores = h @ C @ o
        hits += int(np.argmax(scores) == i.gt.answer_idx)
    return hits / len(insts)


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    temp_miou: float
    asa: float

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "temp_miou": self.temp_miou, "asa": self.asa}


def evaluate(predictions: Sequence[tuple[int, TimeSpan]], gts: Sequence[tuple[int, TimeSpan]]) -> Metrics:
    """Answer accuracy, mean temporal IoU, and answer-span joint accuracy (IoU >= 0.5)."""
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("nothing to evaluate")
    correct, ious, joint = 0, 0.0, 0
    for (pa, ps), (ga, gs) in zip(predictions, gts):
        ok = pa == ga
        v = temporal_iou(ps, gs)
        correct += ok
        ious += v
        joint += ok and v >= 0.5
    n = len(gts)
    return Metrics(correct / n, ious / n, joint / n)


def ground_truths(insts: Iterable[QAInstance]) -> list[tuple[int, TimeSpan]]:
    return [(i.gt.answer_idx, i.span) for i in insts]
